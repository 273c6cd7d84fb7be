"""Scene container and on-disk bundle layout.

Bundle directory::

    cameras.json
    frames/<f>/view_<v>.png     8-bit RGB, linear values * 255
    frames/<f>/mask_<v>.png     8-bit single channel, 255 = foreground
    frames/<f>/poses.json       [{person_id, beta[10], theta[72], trans[3]}, ...]
    gt_joints.json              [[n_b x 3 per person] per frame]
    scene.json                  person betas and background color
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .body import BodyModel, PoseParams, SkeletonTemplate, default_template
from .geometry import CameraModel, load_cameras, save_cameras


@dataclass
class Scene:
    cameras: list[CameraModel]
    bodies: list[BodyModel]
    images: np.ndarray  # (F, V, H, W, 3) in [0, 1]
    masks: np.ndarray  # (F, V, H, W) union foreground in {0, 1}
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_poses: list[list[PoseParams]] | None = None  # [frame][person]

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_persons(self) -> int:
        return len(self.bodies)

    def subset(self, frames=None, views=None) -> "Scene":
        frames = list(range(self.n_frames)) if frames is None else list(frames)
        views = list(range(self.n_views)) if views is None else list(views)
        return Scene(
            [self.cameras[v] for v in views], self.bodies,
            self.images[frames][:, views], self.masks[frames][:, views], self.background,
            None if self.gt_poses is None else [self.gt_poses[f] for f in frames],
        )


def save_png(path, array) -> None:
    a = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_poses(path, poses: list[PoseParams]) -> None:
    Path(path).write_text(json.dumps([p.to_dict(i) for i, p in enumerate(poses)], indent=1))


def load_poses(path) -> list[PoseParams]:
    items = sorted(json.loads(Path(path).read_text()), key=lambda d: d.get("person_id", 0))
    return [PoseParams.from_dict(d) for d in items]


def save_pose_frames(out_dir, poses: list[list[PoseParams]]) -> None:
    for f, frame in enumerate(poses):
        d = Path(out_dir) / "frames" / str(f)
        d.mkdir(parents=True, exist_ok=True)
        save_poses(d / "poses.json", frame)


def load_pose_frames(root) -> list[list[PoseParams]]:
    frames = sorted((Path(root) / "frames").iterdir(), key=lambda p: int(p.name))
    return [load_poses(f / "poses.json") for f in frames]


def save_bundle(root, scene: Scene, poses: list[list[PoseParams]] | None = None,
                joints: list[np.ndarray] | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", scene.cameras)
    poses = scene.gt_poses if poses is None else poses
    for f in range(scene.n_frames):
        d = root / "frames" / str(f)
        d.mkdir(parents=True, exist_ok=True)
        for v in range(scene.n_views):
            save_png(d / f"view_{v}.png", scene.images[f, v])
            save_png(d / f"mask_{v}.png", scene.masks[f, v])
        if poses is not None:
            save_poses(d / "poses.json", poses[f])
    if joints is not None:
        (root / "gt_joints.json").write_text(json.dumps([np.asarray(j).tolist() for j in joints]))
    meta = {"betas": [b.beta.tolist() for b in scene.bodies], "background": list(map(float, scene.background))}
    (root / "scene.json").write_text(json.dumps(meta, indent=1))


def load_bundle(root, template: SkeletonTemplate | None = None, dtype=None) -> Scene:
    import torch

    root = Path(root)
    template = default_template() if template is None else template
    cameras = load_cameras(root / "cameras.json")
    meta = json.loads((root / "scene.json").read_text())
    kw = {} if dtype is None else {"dtype": dtype}
    bodies = [BodyModel(template, np.array(b), **kw) for b in meta["betas"]]
    frame_dirs = sorted((root / "frames").iterdir(), key=lambda p: int(p.name))
    images = np.stack([np.stack([load_png(f / f"view_{v}.png") for v in range(len(cameras))])
                       for f in frame_dirs])
    masks = np.stack([np.stack([load_png(f / f"mask_{v}.png") for v in range(len(cameras))])
                      for f in frame_dirs])
    poses = [load_poses(f / "poses.json") for f in frame_dirs] if (frame_dirs[0] / "poses.json").exists() else None
    return Scene(cameras, bodies, images, (masks > 0.5).astype(np.float64), np.array(meta["background"]), poses)


def load_gt_joints(root) -> list[np.ndarray]:
    return [np.array(j) for j in json.loads((Path(root) / "gt_joints.json").read_text())]
