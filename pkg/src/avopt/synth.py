"""Procedural ground truth: textured capsule people, contact motions, camera rigs.

The reference avatars are analytic canonical-space fields built from the same
capsules as the body surrogate, so they are rendered through exactly the same
inverse skinning path as the learned fields.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .body import N_BETAS, N_JOINTS, BodyModel, PoseParams, SkeletonTemplate, default_template, joints3d
from .geometry import CameraModel, look_at
from .body import NearestVertex, inverse_lbs_torch
from .renderer import instance_state, render_image
from .scene import Scene

log = logging.getLogger(__name__)

STRIPE_PERIOD = 0.08  # meters along a segment
STRIPE_TWIST = 2  # stripe turns per revolution around a segment
CONTACT_GAP = 0.01  # meters of clearance between people in contact frames


# ---------------------------------------------------------------------------
# reference field


class ReferenceField(nn.Module):
    """Analytic canonical field of one person: union of shaped capsules.

    Density is ``sigma_max * sigmoid(-sdf / softness)``; color comes from the
    nearest capsule as a two-tone spiral stripe pattern seeded per person.
    """

    def __init__(self, body: BodyModel, texture_seed: int = 0, sigma_max: float = 60.0,
                 softness: float = 0.01, dtype=torch.float64):
        super().__init__()
        t = body.template
        J = body.joints_rest.double().numpy()
        starts = J[t.segment_start]
        ends = np.where((t.segment_end >= 0)[:, None], J[np.maximum(t.segment_end, 0)],
                        starts + t.segment_offset)
        radii = t.segment_radius + t.segment_radius_dirs @ body.beta
        axis = ends - starts
        ref = np.where(np.abs(axis[:, 2:3]) < 0.9 * np.linalg.norm(axis, axis=1, keepdims=True),
                       [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = np.cross(axis / np.linalg.norm(axis, axis=1, keepdims=True), u)
        rng = np.random.default_rng(texture_seed)
        base = rng.uniform(0.15, 0.95, (len(starts), 3))
        alt = np.clip(1.0 - base + rng.uniform(-0.1, 0.1, base.shape), 0.05, 0.95)
        phase = rng.uniform(0, 2 * np.pi, len(starts))
        for name, a in dict(starts=starts, ends=ends, radii=radii, u=u, v=v, base=base, alt=alt,
                            phase=phase).items():
            self.register_buffer(name, torch.as_tensor(a, dtype=dtype))
        b = body.canonical_bounds()
        self.bounds = b
        self.register_buffer("lo", torch.as_tensor(b.min, dtype=dtype))
        self.register_buffer("hi", torch.as_tensor(b.max, dtype=dtype))
        self.sigma_max = sigma_max
        self.softness = softness

    @property
    def dtype(self):
        return self.lo.dtype

    def sdf(self, xbar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Union sdf (N,), nearest capsule index (N,), axial parameter in meters (N,)."""
        ab = self.ends - self.starts
        ap = xbar[:, None, :] - self.starts[None]
        length2 = (ab * ab).sum(-1)
        s = ((ap * ab[None]).sum(-1) / length2).clamp(0, 1)
        closest = self.starts[None] + s[..., None] * ab[None]
        d = torch.linalg.vector_norm(xbar[:, None, :] - closest, dim=-1) - self.radii[None]
        dmin, k = d.min(1)
        along = s.gather(1, k[:, None])[:, 0] * torch.sqrt(length2[k])
        return dmin, k, along

    def forward(self, xbar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        dist, k, along = self.sdf(xbar)
        sigma = self.sigma_max * torch.sigmoid(-dist / self.softness)
        rel = xbar - self.starts[k]
        phi = torch.atan2((rel * self.v[k]).sum(-1), (rel * self.u[k]).sum(-1))
        stripe = 0.5 + 0.5 * torch.sin(2 * np.pi * along / STRIPE_PERIOD + STRIPE_TWIST * phi + self.phase[k])
        color = self.base[k] + stripe[:, None] * (self.alt[k] - self.base[k])
        inside = torch.all((xbar >= self.lo) & (xbar <= self.hi), -1)
        return color * inside[:, None], sigma * inside


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class RigSpec:
    count: int = 8
    radius: float = 3.0
    height: float = 1.2
    look_at: tuple[float, float, float] = (0.0, 0.9, 0.0)
    focal_scale: float = 1.3  # focal length in units of image width
    azimuth_offset: float = 0.0  # radians


@dataclass
class SceneSpec:
    n_persons: int = 2
    n_frames: int = 1
    resolution: tuple[int, int] = (256, 256)
    motion: str = "contact"  # "contact", "apart" or "single"
    rig: RigSpec = field(default_factory=RigSpec)
    betas: list[list[float]] | None = None  # drawn from the seed when None
    texture_seeds: list[int] | None = None
    beta_scale: float = 0.5
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gt_samples_per_box: int = 256

    def __post_init__(self):
        if self.n_persons < 1:
            raise ValueError("n_persons must be >= 1")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion script {self.motion!r}; expected one of {sorted(MOTIONS)}")
        if self.motion == "contact" and self.n_persons != 2:
            raise ValueError("the contact motion needs exactly 2 persons")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        rig = RigSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("rig", {}).items()})
        for k in ("resolution", "background"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(rig=rig, **d)


def camera_rig(rig: RigSpec, resolution: tuple[int, int]) -> list[CameraModel]:
    W, H = resolution
    f = rig.focal_scale * W
    K = np.array([[f, 0, W / 2], [0, f, H / 2], [0, 0, 1.0]])
    target = np.asarray(rig.look_at, dtype=np.float64)
    cams = []
    for k in range(rig.count):
        a = rig.azimuth_offset + 2 * np.pi * k / rig.count
        eye = np.array([rig.radius * np.sin(a), rig.height, rig.radius * np.cos(a)])
        R, t = look_at(eye, target)
        cams.append(CameraModel(K, R, t, (W, H)))
    return cams


# ---------------------------------------------------------------------------
# motion scripts


def _ry(angle: float) -> np.ndarray:
    return np.array([0.0, angle, 0.0])


def _base_pose(rng: np.random.Generator) -> np.ndarray:
    """Relaxed standing pose: arms lowered, slight bends everywhere."""
    th = rng.normal(0.0, 0.04, (N_JOINTS, 3))
    th[0] = 0.0
    th[16] += [0.0, 0.0, -rng.uniform(0.9, 1.2)]  # left arm down
    th[17] += [0.0, 0.0, rng.uniform(0.9, 1.2)]
    th[18] += [0.0, -rng.uniform(0.1, 0.5), 0.0]  # elbows: natural side of the hinge
    th[19] += [0.0, rng.uniform(0.1, 0.5), 0.0]
    th[4] += [rng.uniform(0.05, 0.3), 0.0, 0.0]  # knees: natural side
    th[5] += [rng.uniform(0.05, 0.3), 0.0, 0.0]
    return th


def _contact_keyframe(rng: np.random.Generator, person: int) -> tuple[np.ndarray, np.ndarray]:
    th = rng.normal(0.0, 0.04, (N_JOINTS, 3))
    side = -1.0 if person == 0 else 1.0  # person 0 on the left (-x), facing +x
    th[0] = _ry(-side * np.pi / 2) + rng.normal(0, 0.05, 3)
    th[16] = [0.0, 0.0, -rng.uniform(0.9, 1.2)]  # arms down
    th[17] = [0.0, 0.0, rng.uniform(0.9, 1.2)]
    # right arms reach forward: person 0 to the partner's shoulder, person 1 to the waist
    if person == 0:
        th[17] = [0.0, rng.uniform(1.2, 1.5), rng.uniform(0.2, 0.4)]
        th[19] = [0.0, rng.uniform(0.1, 0.3), 0.0]
    else:
        th[17] = [0.0, rng.uniform(0.9, 1.2), rng.uniform(0.7, 0.9)]
        th[19] = [0.0, rng.uniform(0.4, 0.8), 0.0]
    th[4] += [rng.uniform(0.05, 0.25), 0.0, 0.0]
    th[5] += [rng.uniform(0.05, 0.25), 0.0, 0.0]
    th[3] += [rng.uniform(0.0, 0.15), 0.0, 0.0]  # lean in
    trans = np.array([side * rng.uniform(0.27, 0.31), 0.97, rng.normal(0, 0.02)])
    return th, trans


def _apart_keyframe(rng: np.random.Generator, person: int, n_persons: int) -> tuple[np.ndarray, np.ndarray]:
    th = _base_pose(rng)
    th[0] = _ry(rng.uniform(-np.pi, np.pi))
    x = (person - (n_persons - 1) / 2) * 1.1
    return th, np.array([x, 0.97, rng.normal(0, 0.1)])


def _single_keyframe(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    th = _base_pose(rng)
    th[0] = _ry(rng.uniform(-0.5, 0.5))
    th[16, 1] -= rng.uniform(0.0, 0.8)
    th[17, 1] += rng.uniform(0.0, 0.8)
    return th, np.array([0.0, 0.97, 0.0])


MOTIONS = {"contact", "apart", "single"}


def motion_script(spec: SceneSpec, rng: np.random.Generator) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """(theta (24, 3), trans) per frame per person: two keyframes blended linearly."""
    keys = []
    for _ in range(2):
        if spec.motion == "contact":
            keys.append([_contact_keyframe(rng, p) for p in range(spec.n_persons)])
        elif spec.motion == "apart":
            keys.append([_apart_keyframe(rng, p, spec.n_persons) for p in range(spec.n_persons)])
        else:
            keys.append([_single_keyframe(rng) for _ in range(spec.n_persons)])
    frames = []
    for f in range(spec.n_frames):
        w = 0.0 if spec.n_frames == 1 else f / (spec.n_frames - 1)
        frames.append([((1 - w) * a[0] + w * b[0], (1 - w) * a[1] + w * b[1])
                       for a, b in zip(keys[0], keys[1])])
    return frames


def clearance(bodies: list[BodyModel], fields: list["ReferenceField"], poses: list[PoseParams]) -> float:
    """Smallest signed distance of any person's surface vertices to another person's surface.

    Negative values mean interpenetration.
    """
    with torch.no_grad():
        states = [instance_state(b, f, torch.as_tensor(p.theta), torch.as_tensor(p.trans))
                  for b, f, p in zip(bodies, fields, poses)]
    best = np.inf
    for p, sp in enumerate(states):
        tree = NearestVertex(sp.vertices)
        for q, sq in enumerate(states):
            if p == q:
                continue
            _, idx, _ = tree.query(sq.vertices)
            with torch.no_grad():
                xbar = inverse_lbs_torch(torch.as_tensor(sq.vertices), sp.Minv, sp.offset, torch.as_tensor(idx))
                d = fields[p].sdf(xbar)[0]
            best = min(best, float(d.min()))
    return best


def separate(bodies, fields, poses: list[PoseParams], gap: float = CONTACT_GAP, step: float = 0.005,
             max_steps: int = 200) -> list[PoseParams]:
    """Move two people apart horizontally until their surfaces are ``gap`` apart."""
    poses = [p.copy() for p in poses]
    u = poses[1].trans - poses[0].trans
    u[1] = 0.0
    u /= max(np.linalg.norm(u), 1e-12)
    for _ in range(max_steps):
        if clearance(bodies, fields, poses) >= gap:
            break
        poses[0].trans -= 0.5 * step * u
        poses[1].trans += 0.5 * step * u
    return poses


# ---------------------------------------------------------------------------
# generation


@dataclass
class SyntheticScene:
    """Everything the generator knows: specification, avatars and true poses."""

    spec: SceneSpec
    cameras: list[CameraModel]
    bodies: list[BodyModel]
    fields: list[ReferenceField]
    poses: list[list[PoseParams]]  # [frame][person]
    seed: int

    @property
    def template(self) -> SkeletonTemplate:
        return self.bodies[0].template if self.bodies else default_template()

    def joints(self) -> list[np.ndarray]:
        """(L, n_b, 3) true joints per frame."""
        return [np.stack([joints3d(self.template, p) for p in frame]) if frame else np.zeros((0, N_JOINTS, 3))
                for frame in self.poses]


def generate_scene(spec: SceneSpec, seed: int = 0, template: SkeletonTemplate | None = None) -> SyntheticScene:
    template = default_template() if template is None else template
    ss = np.random.SeedSequence(seed)
    shape_rng, motion_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    L = spec.n_persons
    betas = (np.asarray(spec.betas, dtype=np.float64) if spec.betas is not None
             else shape_rng.normal(0.0, spec.beta_scale, (L, N_BETAS)))
    tex = spec.texture_seeds if spec.texture_seeds is not None else [int(s) for s in shape_rng.integers(0, 2**31, L)]
    bodies = [BodyModel(template, b) for b in betas]
    fields = [ReferenceField(b, int(t)) for b, t in zip(bodies, tex)]
    poses = [[PoseParams(beta, th.reshape(-1), tr) for beta, (th, tr) in zip(betas, frame)]
             for frame in motion_script(spec, motion_rng)]
    if spec.motion == "contact":
        # keyframes put the people in reach of each other; resolve interpenetration
        poses = [separate(bodies, fields, frame) for frame in poses]
    return SyntheticScene(spec, camera_rig(spec.rig, spec.resolution), bodies, fields, poses, seed)


def empty_scene(spec: SceneSpec) -> SyntheticScene:
    """A scene with the rig of ``spec`` and nobody in it."""
    return SyntheticScene(spec, camera_rig(spec.rig, spec.resolution), [], [], [[] for _ in range(spec.n_frames)], 0)


def render_ground_truth(scene: SyntheticScene, n_per_box: int | None = None, frames=None) -> Scene:
    """Render every view of every frame with the reference fields."""
    spec = scene.spec
    n = spec.gt_samples_per_box if n_per_box is None else n_per_box
    frames = range(len(scene.poses)) if frames is None else frames
    W, H = spec.resolution
    images, masks = [], []
    for f in frames:
        fi, fm = [], []
        for cam in scene.cameras:
            img, alpha, _ = render_image(cam, scene.bodies, scene.fields, scene.poses[f], n_per_box=n,
                                         background=spec.background)
            fi.append(img)
            fm.append((alpha > 0.5).astype(np.float64))
        images.append(fi)
        masks.append(fm)
        log.debug("rendered ground truth frame %d", f)
    images = np.array(images).reshape(len(images), len(scene.cameras), H, W, 3)
    masks = np.array(masks).reshape(len(masks), len(scene.cameras), H, W)
    return Scene(scene.cameras, scene.bodies, images, masks, np.asarray(spec.background, dtype=np.float64),
                 [scene.poses[f] for f in frames])


def perturb_poses(poses: list[PoseParams], angle_sigma: float, trans_sigma: float, seed: int) -> list[PoseParams]:
    """I.i.d. Gaussian noise on every joint-angle component and the root translation."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        out.append(PoseParams(p.beta.copy(), p.theta + rng.normal(0.0, 1.0, p.theta.shape) * angle_sigma,
                              p.trans + rng.normal(0.0, 1.0, 3) * trans_sigma))
    return out


def perturb_frames(frames: list[list[PoseParams]], angle_sigma: float, trans_sigma: float,
                   seed: int) -> list[list[PoseParams]]:
    ss = np.random.SeedSequence(seed)
    return [perturb_poses(fr, angle_sigma, trans_sigma, int(s.generate_state(1)[0]))
            for fr, s in zip(frames, ss.spawn(len(frames)))]


def load_spec(path) -> SceneSpec:
    import tomli

    with open(path, "rb") as fh:
        d = tomli.load(fh)
    return SceneSpec.from_dict(d.get("scene", d))


def write_bundle(root, scene: SyntheticScene, gt: Scene) -> None:
    from .scene import save_bundle

    save_bundle(Path(root), gt, scene.poses, scene.joints())
