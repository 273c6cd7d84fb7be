"""Reusable synthetic experiment setups with on-disk caching.

Rendering ground truth and fitting avatars dominate the cost of every
experiment, so both are cached under ``$AVOPT_CACHE`` (default
``~/.cache/avopt``), keyed by every argument that affects the result.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .field import load_field, save_field
from .synth import RigSpec, SceneSpec, SyntheticScene, generate_scene, render_ground_truth
from .training import TrainConfig, train_avatars

log = logging.getLogger(__name__)

# two fixed people reused by every contact scene
CONTACT_BETAS = [[0.3, -0.2, 0.1, 0.0, 0.2, -0.1, 0.0, 0.1, -0.2, 0.1],
                 [-0.4, 0.3, -0.1, 0.2, -0.2, 0.1, 0.1, -0.1, 0.2, 0.0]]
CONTACT_TEXTURES = [11, 23]
# bump when the generator changes so stale renders and fits are not reused
GENERATOR_VERSION = 2


def cache_dir() -> Path:
    d = Path(os.environ.get("AVOPT_CACHE", Path.home() / ".cache" / "avopt"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def contact_spec(resolution: int = 256, n_frames: int = 1, views: int = 8) -> SceneSpec:
    return SceneSpec(n_persons=2, n_frames=n_frames, resolution=(resolution, resolution), motion="contact",
                     rig=RigSpec(count=views), betas=CONTACT_BETAS, texture_seeds=CONTACT_TEXTURES)


def single_spec(resolution: int = 256, n_frames: int = 1, views: int = 8) -> SceneSpec:
    return SceneSpec(n_persons=1, n_frames=n_frames, resolution=(resolution, resolution), motion="single",
                     rig=RigSpec(count=views), betas=[CONTACT_BETAS[0]], texture_seeds=[CONTACT_TEXTURES[0]])


def ground_truth(spec: SceneSpec, seed: int):
    """(SyntheticScene, rendered Scene), rendered once and cached."""
    synthetic = generate_scene(spec, seed)
    path = cache_dir() / f"gt-{_key(GENERATOR_VERSION, asdict(spec), seed)}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            images, masks = pickle.load(fh)
        from .scene import Scene

        gt = Scene(synthetic.cameras, synthetic.bodies, images, masks,
                   np.asarray(spec.background, dtype=np.float64), synthetic.poses)
    else:
        log.info("rendering ground truth for seed %d", seed)
        gt = render_ground_truth(synthetic)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump((gt.images, gt.masks), fh)
        tmp.replace(path)
    return synthetic, gt


def fitted_fields(spec: SceneSpec, seed: int, config: TrainConfig, dtype=torch.float32):
    """Fields trained on the true poses of ``generate_scene(spec, seed)``, cached."""
    key = _key(GENERATOR_VERSION, asdict(spec), seed, asdict(config))
    paths = [cache_dir() / f"field-{key}-{i}.bin" for i in range(spec.n_persons)]
    if all(p.exists() for p in paths):
        return [load_field(p, dtype) for p in paths]
    synthetic, gt = ground_truth(spec, seed)
    log.info("fitting avatars for seed %d (%d iterations)", seed, config.iterations)
    fields = train_avatars(gt, synthetic.poses, config).fields
    for f, p in zip(fields, paths):
        tmp = p.with_suffix(".tmp")
        save_field(tmp, f)
        tmp.replace(p)
    return [load_field(p, dtype) for p in paths]


CONTACT_TRAIN_SEED = 1000


def contact_avatars(iterations: int = 3000, n_frames: int = 3, dtype=torch.float32):
    """Avatars of the two contact identities, fitted on a separate training clip."""
    spec = contact_spec(n_frames=n_frames)
    return fitted_fields(spec, CONTACT_TRAIN_SEED, TrainConfig(iterations=iterations, seed=0), dtype)


def joints_of(synthetic: SyntheticScene, poses) -> list[np.ndarray]:
    from .body import joints3d

    return [np.stack([joints3d(synthetic.template, p) for p in frame]) for frame in poses]


def contact_case(seed: int, resolution: int = 256, views: int = 8, angle_deg: float = 5.0, trans_m: float = 0.03):
    """(SyntheticScene, rendered Scene, perturbed initial poses) of one single-frame contact scene."""
    from .synth import perturb_frames

    synthetic, gt = ground_truth(contact_spec(resolution, 1, views), seed)
    init = perturb_frames(synthetic.poses, np.deg2rad(angle_deg), trans_m, seed)
    return synthetic, gt, init


def overlap_of(synthetic: SyntheticScene, fields, poses, n_grid: int = 64) -> float:
    from .metrics import overlap_metric
    from .renderer import instance_state

    with torch.no_grad():
        states = [instance_state(b, f, torch.as_tensor(p.theta), torch.as_tensor(p.trans))
                  for b, f, p in zip(synthetic.bodies, fields, poses)]
    return overlap_metric(states, n_grid)


def recover(synthetic: SyntheticScene, gt, init, fields, config) -> dict:
    """Run pose optimization from ``init``; MPJPE before and after, final overlap and wall time."""
    import time

    from .metrics import mpjpe
    from .poseopt import optimize_poses

    truth = synthetic.joints()
    t = time.perf_counter()
    res = optimize_poses(gt, fields, init, config)
    seconds = time.perf_counter() - t
    before = float(np.mean([mpjpe(j, g) for j, g in zip(joints_of(synthetic, init), truth)]))
    after = float(np.mean([mpjpe(j, g) for j, g in zip(joints_of(synthetic, res.poses), truth)]))
    return {"initial_mpjpe": before, "final_mpjpe": after, "seconds": seconds,
            "overlap": overlap_of(synthetic, fields, res.poses[0]), "poses": res.poses}


def reprojection_case(synthetic: SyntheticScene, init, noise_px: float, seed: int) -> float:
    """MPJPE of the 2D-joint fitting baseline given noisy projections of the true joints."""
    from .geometry import project_points
    from .metrics import mpjpe
    from .poseopt import reprojection_baseline

    rng = np.random.default_rng([seed, 2])
    truth = synthetic.joints()[0]
    j2d = [np.stack([project_points(c, j) for j in truth]) for c in synthetic.cameras]
    j2d = [j + rng.normal(0.0, noise_px, j.shape) for j in j2d]
    res = reprojection_baseline(init[0], j2d, synthetic.cameras, synthetic.template)
    return mpjpe(joints_of(synthetic, [res.poses])[0], truth)


def alternating_vs_joint(synthetic: SyntheticScene, gt, init, fields, rounds: int = 2, pose_iterations: int = 100,
                         train_iterations: int = 100, seed: int = 0) -> dict:
    """Final MPJPE of alternation and of joint pose-and-field optimization with the same step budget.

    Both start from copies of ``fields`` and the perturbed ``init``.
    """
    import copy

    from .alternate import AlternateConfig, run
    from .metrics import mpjpe
    from .poseopt import PoseConfig

    truth = synthetic.joints()[0]
    acfg = AlternateConfig(rounds=rounds, seed=seed,
                           train=TrainConfig(iterations=train_iterations, eval_every=25, seed=seed),
                           pose=PoseConfig(iterations=pose_iterations, seed=seed))
    alt = run(gt, init, acfg, fields=copy.deepcopy(fields))
    jcfg = TrainConfig(iterations=rounds * (pose_iterations + train_iterations), joint_optimization=True,
                       eval_every=25, seed=seed)
    joint = train_avatars(gt, init, jcfg, copy.deepcopy(fields))
    return {"alternating": mpjpe(joints_of(synthetic, alt.poses)[0], truth),
            "joint": mpjpe(joints_of(synthetic, joint.poses)[0], truth),
            "initial": mpjpe(joints_of(synthetic, init)[0], truth)}


def avatar_quality(iterations: int = 5000, held_out: int = 7, seed: int = 0, n_per_box: int = 64) -> dict:
    """Fit a single person on all views but ``held_out``; PSNR there and mean mask IoU over all views."""
    from .renderer import render_image

    spec = single_spec()
    synthetic, gt = ground_truth(spec, seed)
    views = [v for v in range(spec.rig.count) if v != held_out]
    fields = train_avatars(gt, synthetic.poses, TrainConfig(iterations=iterations, views=views, seed=seed)).fields
    ious, psnr = [], None
    for v, cam in enumerate(synthetic.cameras):
        img, alpha, _ = render_image(cam, synthetic.bodies, fields, synthetic.poses[0], n_per_box=n_per_box,
                                     background=spec.background)
        m, g = alpha > 0.5, gt.masks[0, v] > 0.5
        ious.append((m & g).sum() / max((m | g).sum(), 1))
        if v == held_out:
            psnr = float(-10 * np.log10(np.mean((img - gt.images[0, v]) ** 2)))
    return {"psnr": psnr, "iou": float(np.mean(ious)), "iou_held_out": float(ious[held_out])}
