"""Avatar-guided pose refinement with frozen fields.

Poses are parameterized as ``Θ = Θ₀ + net(Θ₀)`` with one small residual
network per person. Each optimizer step freezes its discrete choices in a
:class:`StepPlan` (ray batch, sample depths, nearest vertices, skip mask and
collision membership) and differentiates the weighted objective with respect
to the network parameters.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
import torch
from torch import nn

from .batches import RayBatch, RayPool, dilated_mask_select
from .body import NearestVertex, N_JOINTS, PoseParams, SkeletonTemplate, inverse_lbs_torch
from .geometry import CameraModel, project_torch
from .renderer import InstanceState, RayPlan, instance_state, plan_rays, render_plan
from .scene import Scene
from .training import EPS, DivergenceError, _DivergenceGuard, cosine_factor, huber_norm

log = logging.getLogger(__name__)

POSE_DIM = 3 * N_JOINTS + 3


# ---------------------------------------------------------------------------
# residual parameterization


class ResidualPoseNet(nn.Module):
    """MLP from the normalized initial pose to a pose residual; zero at initialization."""

    def __init__(self, dim: int = POSE_DIM, hidden: int = 128, theta_scale: float = 0.1,
                 trans_scale: float = 0.05, dtype=torch.float64, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n_theta = dim - 3
        self.register_buffer("in_scale", torch.tensor([math.pi] * n_theta + [1.0] * 3, dtype=dtype))
        self.register_buffer("out_scale", torch.tensor([theta_scale] * n_theta + [trans_scale] * 3, dtype=dtype))
        self.l1 = nn.Linear(dim, hidden, dtype=dtype)
        self.l2 = nn.Linear(hidden, hidden, dtype=dtype)
        self.out = nn.Linear(hidden, dim, dtype=dtype)
        with torch.no_grad():
            for lin in (self.l1, self.l2):
                bound = 1 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=g)
                lin.bias.uniform_(-bound, bound, generator=g)
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, pose0: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.l1(pose0 / self.in_scale))
        h = torch.tanh(self.l2(h))
        return self.out(h) * self.out_scale


def pose_vector(p: PoseParams, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.concatenate([p.theta, p.trans]), dtype=dtype)


def current_pose_torch(net: ResidualPoseNet, pose0: PoseParams) -> tuple[torch.Tensor, torch.Tensor]:
    x0 = pose_vector(pose0, net.in_scale.dtype)
    x = x0 + net(x0)
    return x[:-3], x[-3:]


def current_pose(net: ResidualPoseNet, pose0: PoseParams) -> PoseParams:
    """Θ₀ + net(Θ₀) as plain values (shape untouched)."""
    with torch.no_grad():
        th, tr = current_pose_torch(net, pose0)
    return PoseParams(pose0.beta.copy(), th.numpy().copy(), tr.numpy().copy())


# ---------------------------------------------------------------------------
# losses


def loss_rgb_pose(pred: torch.Tensor, gt: torch.Tensor, delta: float = 0.1) -> torch.Tensor:
    return huber_norm(pred, gt, delta)


def loss_mask_pose(alpha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """One-sided cross entropy summed over rays: -sum mask * log(alpha)."""
    return -(mask * torch.log(alpha.clamp(EPS, 1.0))).sum()


def loss_reg(theta: torch.Tensor, template: SkeletonTemplate, hinge_weight: float = 1.0) -> torch.Tensor:
    """||θ||₂ plus an exponential penalty on hyper-extended elbows and knees."""
    s2 = (theta * theta).sum()
    norm = torch.where(s2 > 0, torch.sqrt(torch.where(s2 > 0, s2, torch.ones_like(s2))), torch.zeros_like(s2))
    idx = torch.as_tensor(template.prior_joint_indices)
    sign = torch.as_tensor(template.prior_joint_signs, dtype=theta.dtype)
    return norm + hinge_weight * torch.exp(sign * theta[idx]).sum()


@dataclass
class CollisionSet:
    """Probe points inside two instances at once, with the frozen lookups to re-evaluate them."""

    points: torch.Tensor  # (M, 3)
    pairs: np.ndarray  # (M, 2) instance indices p < q
    delta: torch.Tensor  # (M,) probe interval
    nearest: np.ndarray  # (M, 2) nearest posed vertex in p and q
    alpha_p: torch.Tensor  # (M,)
    alpha_q: torch.Tensor  # (M,)

    def __len__(self) -> int:
        return len(self.points)

    def swapped(self) -> "CollisionSet":
        return CollisionSet(self.points, self.pairs[:, ::-1].copy(), self.delta, self.nearest[:, ::-1].copy(),
                            self.alpha_q, self.alpha_p)


def _empty_collision(dtype) -> CollisionSet:
    z = torch.zeros(0, dtype=dtype)
    return CollisionSet(torch.zeros(0, 3, dtype=dtype), np.zeros((0, 2), dtype=np.int64), z,
                        np.zeros((0, 2), dtype=np.int64), z, z)


def _probe_density(st: InstanceState, pts: np.ndarray, skip_distance: float | None,
                   search_radius: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Densities (no grad) and nearest vertices, applying the renderer's skip rule."""
    sigma = np.zeros(len(pts))
    idx = np.zeros(len(pts), dtype=np.int64)
    if skip_distance is None:
        live = np.ones(len(pts), dtype=bool)
        _, nn_idx, _ = NearestVertex(st.vertices).query(pts)
    else:
        near = st.occupancy(skip_distance)(pts)
        live = np.zeros(len(pts), dtype=bool)
        sub = np.nonzero(near)[0]
        d, nn_idx_sub, far = NearestVertex(st.vertices).query(pts[sub], max(search_radius, skip_distance))
        outward = ((pts[sub] - st.vertices[nn_idx_sub]) * st.normals[nn_idx_sub]).sum(1) > 0
        ok = ~(far | (outward & (d > skip_distance)))
        live[sub[ok]] = True
        nn_idx = np.zeros(len(pts), dtype=np.int64)
        nn_idx[sub] = nn_idx_sub
    idx[:] = nn_idx
    if live.any():
        with torch.no_grad():
            x = torch.as_tensor(pts[live], dtype=st.Minv.dtype)
            xbar = inverse_lbs_torch(x, st.Minv, st.offset, torch.as_tensor(idx[live]))
            _, s = st.field(xbar.to(getattr(st.field, "dtype", torch.float64)))
        sigma[live] = s.double().numpy()
    return sigma, idx


def collision_set(states: list[InstanceState], n_grid: int = 32, eps_s: float = 1e-2,
                  rng: np.random.Generator | None = None, skip_distance: float | None = 0.06,
                  dtype=torch.float64) -> CollisionSet:
    """Probe each pairwise box intersection on an ``n_grid``³ stratified grid.

    A probe is kept when both instances give it an opacity above ``eps_s``,
    with opacity ``1 - exp(-σ δ)`` for ``δ`` = intersection diagonal / n_grid.
    """
    if len(states) < 2:
        return _empty_collision(dtype)
    pts_all, pairs, deltas, nearest, ap, aq = [], [], [], [], [], []
    for p in range(len(states)):
        for q in range(p + 1, len(states)):
            box = states[p].box.intersection(states[q].box)
            if box is None or np.any(box.max - box.min <= 0):
                continue
            cells = (np.stack(np.meshgrid(*[np.arange(n_grid)] * 3, indexing="ij"), -1).reshape(-1, 3)
                     .astype(np.float64))
            jit = 0.5 if rng is None else rng.random(cells.shape)
            pts = box.min + (cells + jit) / n_grid * (box.max - box.min)
            delta = box.diagonal / n_grid
            sp, ip = _probe_density(states[p], pts, skip_distance)
            sq, iq = _probe_density(states[q], pts, skip_distance)
            a_p, a_q = 1 - np.exp(-sp * delta), 1 - np.exp(-sq * delta)
            keep = (a_p > eps_s) & (a_q > eps_s)
            m = int(keep.sum())
            if m == 0:
                continue
            pts_all.append(pts[keep])
            pairs.append(np.tile([p, q], (m, 1)))
            deltas.append(np.full(m, delta))
            nearest.append(np.stack([ip[keep], iq[keep]], 1))
            ap.append(a_p[keep])
            aq.append(a_q[keep])
    if not pts_all:
        return _empty_collision(dtype)
    cat = np.concatenate
    return CollisionSet(torch.as_tensor(cat(pts_all), dtype=dtype), cat(pairs),
                        torch.as_tensor(cat(deltas), dtype=dtype), cat(nearest),
                        torch.as_tensor(cat(ap), dtype=dtype), torch.as_tensor(cat(aq), dtype=dtype))


def collision_alphas(cset: CollisionSet, states: list[InstanceState]) -> CollisionSet:
    """Re-evaluate member opacities through the (differentiable) current states."""
    if len(cset) == 0:
        return cset
    out = []
    for side in (0, 1):
        alpha = torch.zeros(len(cset), dtype=cset.delta.dtype)
        for l, st in enumerate(states):
            sel = np.nonzero(cset.pairs[:, side] == l)[0]
            if len(sel) == 0:
                continue
            x = cset.points[sel].to(st.Minv.dtype)
            xbar = inverse_lbs_torch(x, st.Minv, st.offset, torch.as_tensor(cset.nearest[sel, side]))
            _, s = st.field(xbar.to(getattr(st.field, "dtype", torch.float64)))
            a = 1 - torch.exp(-s.to(alpha.dtype) * cset.delta[sel])
            alpha = alpha.index_put((torch.as_tensor(sel),), a)
        out.append(alpha)
    return CollisionSet(cset.points, cset.pairs, cset.delta, cset.nearest, out[0], out[1])


def loss_collision(cset: CollisionSet) -> torch.Tensor:
    if len(cset) == 0:
        return torch.zeros((), dtype=cset.delta.dtype)
    return (cset.alpha_p * cset.alpha_q).mean()


# ---------------------------------------------------------------------------
# objective


@dataclass
class LossWeights:
    rgb: float = 1.0
    alpha: float = 0.1
    reg: float = 1e-3
    pa: float = 1e-2
    hinge: float = 1.0  # inner weight of the hinge penalty
    eps_s: float = 1e-2
    n_grid: int = 32

    def __post_init__(self):
        for f in dc_fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")
        if self.n_grid < 1:
            raise ValueError("n_grid must be >= 1")


@dataclass
class PoseConfig:
    iterations: int = 300
    lr: float = 1e-3
    lr_final_ratio: float = 0.1
    batch_size: int = 1024
    n_per_box: int = 64
    dilation: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    hidden: int = 128
    theta_scale: float = 0.1
    trans_scale: float = 0.05
    eval_every: int = 10
    eval_rays: int = 4096
    views: list[int] | None = None
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "PoseConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pose option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepPlan:
    """Discrete choices frozen for one evaluation of the objective."""

    batch: RayBatch
    rays: RayPlan
    collisions: CollisionSet


class PoseProblem:
    """The Eq.-8-style objective of one frame for fixed fields, as a function of the nets."""

    def __init__(self, scene: Scene, frame: int, fields, init: list[PoseParams], nets: list[ResidualPoseNet],
                 config: PoseConfig):
        self.scene, self.frame, self.fields, self.init, self.nets = scene, frame, fields, init, nets
        self.cfg = config
        self.bodies = scene.bodies
        select = dilated_mask_select(scene, frame, config.dilation)
        if config.views is not None:
            drop = np.setdiff1d(np.arange(scene.n_views), config.views)
            select[drop] = False
        self.pool = RayPool(scene, frame, None, select)

    def states(self) -> list[InstanceState]:
        out = []
        for body, fld, net, p0 in zip(self.bodies, self.fields, self.nets, self.init):
            th, tr = current_pose_torch(net, p0)
            out.append(instance_state(body, fld, th, tr))
        return out

    def plan(self, rng: np.random.Generator, batch: RayBatch | None = None, n_rays: int | None = None) -> StepPlan:
        with torch.no_grad():
            st = self.states()
        batch = self.pool.sample(rng, n_rays or self.cfg.batch_size) if batch is None else batch
        rays = plan_rays(batch.origins, batch.dirs, st, self.cfg.n_per_box, rng=rng)
        w = self.cfg.weights
        cset = (collision_set(st, w.n_grid, w.eps_s, rng) if w.pa > 0 and len(st) > 1
                else _empty_collision(torch.float64))
        return StepPlan(batch, rays, cset)

    def terms(self, plan: StepPlan) -> dict[str, torch.Tensor]:
        st = self.states()
        out = render_plan(plan.rays, st)
        bg = torch.as_tensor(self.scene.background, dtype=out.color.dtype)
        pred = out.with_background(bg)
        colors = torch.as_tensor(plan.batch.colors, dtype=pred.dtype)
        masks = torch.as_tensor(plan.batch.masks, dtype=pred.dtype)
        w = self.cfg.weights
        reg = sum(loss_reg(current_pose_torch(n, p)[0], b.template, w.hinge)
                  for n, p, b in zip(self.nets, self.init, self.bodies))
        return {
            "rgb": loss_rgb_pose(pred, colors),
            "alpha": loss_mask_pose(out.alpha, masks),
            "reg": reg,
            "pa": loss_collision(collision_alphas(plan.collisions, st)),
        }

    def objective(self, plan: StepPlan, terms: dict | None = None) -> torch.Tensor:
        t = self.terms(plan) if terms is None else terms
        w = self.cfg.weights
        return w.rgb * t["rgb"] + w.alpha * t["alpha"] + w.reg * t["reg"] + w.pa * t["pa"]


def make_nets(n: int, config: PoseConfig) -> list[ResidualPoseNet]:
    return [ResidualPoseNet(hidden=config.hidden, theta_scale=config.theta_scale,
                            trans_scale=config.trans_scale, seed=config.seed + i) for i in range(n)]


@dataclass
class PoseResult:
    poses: list[list[PoseParams]]  # [frame][person]
    trace: list[dict]
    best_iteration: int
    best_objective: float
    initial_objective: float


def optimize_poses(scene: Scene, fields, init: list[list[PoseParams]], config: PoseConfig) -> PoseResult:
    """Refine the poses of every frame; the nets are shared by all frames of the clip.

    The returned poses are those of the best iterate under a fixed evaluation
    batch (the initial poses count as iterate 0), so the evaluation objective
    never ends higher than it started.
    """
    cfg = config
    n_frames = len(init)
    if cfg.iterations == 0 or n_frames == 0:
        return PoseResult([[p.copy() for p in fr] for fr in init], [], 0, float("nan"), float("nan"))
    flags = [[p.requires_grad for p in fl.parameters()] for fl in fields]
    for fl in fields:
        fl.check_finite() if hasattr(fl, "check_finite") else None
        fl.requires_grad_(False)
    try:
        return _optimize(scene, fields, init, cfg)
    finally:
        for fl, fl_flags in zip(fields, flags):
            for p, f in zip(fl.parameters(), fl_flags):
                p.requires_grad_(f)


def _optimize(scene: Scene, fields, init: list[list[PoseParams]], cfg: PoseConfig) -> PoseResult:
    n_frames = len(init)
    rng = np.random.default_rng(cfg.seed)
    nets = make_nets(len(scene.bodies), cfg)
    problems = [PoseProblem(scene, f, fields, init[f], nets, cfg) for f in range(n_frames)]
    eval_plans_seed = cfg.seed + 7919
    opt = torch.optim.Adam([p for n in nets for p in n.parameters()], lr=cfg.lr)

    def evaluate() -> float:
        total = 0.0
        with torch.no_grad():
            for f, prob in enumerate(problems):
                erng = np.random.default_rng([eval_plans_seed, f])
                batch = prob.pool.sample(erng, cfg.eval_rays)
                total += float(prob.objective(prob.plan(erng, batch)))
        return total

    best = evaluate()
    initial = best
    best_state, best_it = copy.deepcopy([n.state_dict() for n in nets]), 0
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    trace = []
    for it in range(1, cfg.iterations + 1):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * cosine_factor(it - 1, cfg.iterations, cfg.lr_final_ratio)
        prob = problems[(it - 1) % n_frames]
        plan = prob.plan(rng)
        terms = prob.terms(plan)
        total = prob.objective(plan, terms)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        value = float(total.detach())
        guard.update(value, it)
        row = {"iteration": it, "frame": prob.frame, **{k: float(v.detach()) for k, v in terms.items()},
               "total": value, "n_collision": len(plan.collisions)}
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row["eval"] = evaluate()
            if row["eval"] < best:
                best, best_it = row["eval"], it
                best_state = copy.deepcopy([n.state_dict() for n in nets])
            log.info("pose it %d total %.5f eval %.5f", it, value, row["eval"])
        trace.append(row)
    for n, s in zip(nets, best_state):
        n.load_state_dict(s)
    poses = [[current_pose(n, p) for n, p in zip(nets, fr)] for fr in init]
    return PoseResult(poses, trace, best_it, best, initial)


# ---------------------------------------------------------------------------
# keypoint reprojection baseline


@dataclass
class ReprojectionResult:
    poses: list[PoseParams]
    degenerate: bool
    final_loss: float


def reprojection_baseline(init: list[PoseParams], joints2d: list[np.ndarray], cameras: list[CameraModel],
                          template: SkeletonTemplate, reg_weight: float = 1e-3, hinge_weight: float = 1.0,
                          iterations: int = 100) -> ReprojectionResult:
    """Fit joint angles and root translation to 2D joints seen by ``cameras``.

    ``joints2d[v]`` is an (L, n_b, 2) array of pixel positions in view ``v``.
    Rotations of leaf joints move no joint and stay at their initial values.
    With a single view the depth of every joint is unobservable and the
    result is flagged degenerate.
    """
    from .body import BodyModel

    if len(joints2d) != len(cameras):
        raise ValueError("need one 2D joint array per camera")
    leaves = [j for j in range(template.n_joints) if j not in set(template.parents.tolist())]
    free = torch.ones(template.n_joints, 3, dtype=torch.float64)
    free[leaves] = 0.0
    free = free.reshape(-1)
    out = []
    final = 0.0
    for l, p0 in enumerate(init):
        body = BodyModel(template, p0.beta)
        th0 = torch.as_tensor(p0.theta, dtype=torch.float64)
        d_th = torch.zeros_like(th0, requires_grad=True)
        tr = torch.tensor(p0.trans, dtype=torch.float64, requires_grad=True)
        targets = [torch.as_tensor(j2[l], dtype=torch.float64) for j2 in joints2d]
        opt = torch.optim.LBFGS([d_th, tr], lr=1.0, max_iter=iterations, tolerance_grad=1e-12,
                                tolerance_change=1e-15, history_size=50, line_search_fn="strong_wolfe")

        def objective():
            theta = th0 + d_th * free
            J = body.joints(theta, tr)
            loss = sum(((project_torch(c, J) - t) ** 2).sum() for c, t in zip(cameras, targets))
            return loss + reg_weight * loss_reg(theta, template, hinge_weight)

        def closure():
            opt.zero_grad()
            loss = objective()
            loss.backward()
            return loss

        opt.step(closure)
        with torch.no_grad():
            final += float(objective())
            out.append(PoseParams(p0.beta.copy(), (th0 + d_th * free).numpy().copy(), tr.detach().numpy().copy()))
    return ReprojectionResult(out, len(cameras) < 2, final)
