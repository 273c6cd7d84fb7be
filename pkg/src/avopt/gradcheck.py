"""Finite-difference verification of every loss term on random 2-person scenes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .grad import GradReport, ParamVector, fd_check_terms
from .renderer import render_plan
from .poseopt import LossWeights, PoseConfig, PoseProblem, make_nets
from .synth import SceneSpec, RigSpec, generate_scene, perturb_poses, render_ground_truth
from .training import TrainConfig, loss_density_reg, make_fields, render_losses

log = logging.getLogger(__name__)

TERMS = ("train_rgb", "train_alpha", "layer", "hard", "density", "pose_rgb", "pose_mask", "pose_reg", "pose_pa")


@dataclass
class GradCheckConfig:
    configs: int = 5
    resolution: int = 40
    views: int = 3
    rays: int = 96
    n_per_box: int = 12
    density_points: int = 256
    collision_grid: int = 10
    n_coords: int = 12
    h: float = 1e-4
    floor: float = 1e-3
    grid_std: float = 1.0  # random feature grids give non-trivial decoder gradients
    net_std: float = 0.01  # and a nonzero residual exercises the whole pose net
    terms: list[str] = field(default_factory=lambda: list(TERMS))
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown term(s) {sorted(unknown)}; choose from {list(TERMS)}")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.configs < 1:
            raise ValueError("configs must be >= 1")


def build_problem(cfg: GradCheckConfig, index: int):
    """(objectives, ParamVector) for random configuration ``index`` in double precision."""
    seed = cfg.seed + index
    spec = SceneSpec(n_persons=2, n_frames=1, motion="contact", resolution=(cfg.resolution, cfg.resolution),
                     rig=RigSpec(count=cfg.views))
    synthetic = generate_scene(spec, seed)
    gt = render_ground_truth(synthetic, n_per_box=cfg.n_per_box)
    g = torch.Generator().manual_seed(seed)
    fields = make_fields(synthetic.bodies, seed=seed, dtype=torch.float64)
    pcfg = PoseConfig(batch_size=cfg.rays, n_per_box=cfg.n_per_box, seed=seed,
                      weights=LossWeights(n_grid=cfg.collision_grid))
    nets = make_nets(2, pcfg)
    with torch.no_grad():
        for f in fields:
            f.grid.normal_(0.0, cfg.grid_std, generator=g)
        for n in nets:
            n.out.weight.normal_(0.0, cfg.net_std, generator=g)
    init = perturb_poses(synthetic.poses[0], np.deg2rad(5.0), 0.03, seed)
    prob = PoseProblem(gt, 0, fields, init, nets, pcfg)
    rng = np.random.default_rng(seed)
    plan = prob.plan(rng)
    tcfg = TrainConfig()
    density_pts = [f.bounds.min + rng.random((cfg.density_points, 3)) * (f.bounds.max - f.bounds.min)
                   for f in fields]

    def objectives(_pv: ParamVector) -> dict[str, torch.Tensor]:
        t = prob.terms(plan)
        out = {f"pose_{k if k != 'alpha' else 'mask'}": v for k, v in t.items()}
        st = prob.states()
        ro = render_plan(plan.rays, st)
        dtype = ro.color.dtype
        tr = render_losses(ro, torch.as_tensor(plan.batch.colors, dtype=dtype),
                           torch.as_tensor(plan.batch.masks, dtype=dtype),
                           torch.as_tensor(gt.background, dtype=dtype), tcfg)
        out.update({"train_rgb": tr["rgb"], "train_alpha": tr["alpha"], "layer": tr["layer"], "hard": tr["hard"]})
        out["density"] = sum(loss_density_reg(f, b, points=p)
                             for f, b, p in zip(fields, synthetic.bodies, density_pts))
        return {k: out[k] for k in cfg.terms}

    pv = ParamVector()
    for i, n in enumerate(nets):
        pv.add_module(f"posenet{i}", n)
    for i, f in enumerate(fields):
        pv.add_module(f"field{i}", f)
    return objectives, pv, len(plan.collisions)


def run_grad_check(cfg: GradCheckConfig) -> dict[str, GradReport]:
    """Worst error per term and block over ``cfg.configs`` random configurations."""
    merged = {t: GradReport(cfg.h) for t in cfg.terms}
    for c in range(cfg.configs):
        objectives, pv, n_coll = build_problem(cfg, c)
        log.info("configuration %d: %d collision points", c, n_coll)
        reports = fd_check_terms(objectives, pv, h=cfg.h, n_coords=cfg.n_coords, seed=cfg.seed + c, floor=cfg.floor)
        for t, r in reports.items():
            for block, e in r.errors.items():
                merged[t].errors[block] = max(merged[t].errors.get(block, 0.0), e)
                merged[t].n_checked[block] = merged[t].n_checked.get(block, 0) + r.n_checked[block]
    return merged
