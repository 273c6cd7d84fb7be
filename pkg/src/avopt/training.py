"""Avatar fitting: optimize canonical fields (and optionally poses) against images."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields as dc_fields

import numpy as np
import torch

from .batches import RayPool, box_hit_select
from .body import BodyModel, PoseParams
from .field import CanonicalField, NonFiniteError
from .renderer import InstanceState, RenderOutput, instance_state, plan_rays, render_plan
from .scene import Scene

log = logging.getLogger(__name__)

EPS = 1e-7


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses


def huber_norm(pred: torch.Tensor, target: torch.Tensor, delta: float = 0.1) -> torch.Tensor:
    """Mean over rays of the Huber function of the color-difference norm."""
    r2 = ((pred - target) ** 2).sum(-1)
    big = r2 > delta * delta
    r = torch.sqrt(torch.where(big, r2, torch.ones_like(r2)))
    per_ray = torch.where(big, delta * (r - 0.5 * delta), 0.5 * r2)
    return per_ray.mean() if per_ray.numel() else pred.new_zeros(())


def loss_rgb_train(pred: torch.Tensor, gt: torch.Tensor, delta: float = 0.1) -> torch.Tensor:
    return huber_norm(pred, gt, delta)


def loss_alpha_train(alpha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return ((alpha - mask) ** 2).mean()


def loss_layer(instance_alpha: torch.Tensor) -> torch.Tensor:
    """Mean per-layer opacity entropy -a log a, (R, L) input."""
    a = instance_alpha
    return -(a * torch.log(a.clamp(min=EPS))).mean()


HARD_SURFACE_MIN = -math.log(1 + math.exp(-1))  # attained at alpha in {0, 1}


def loss_hard_surface(alpha: torch.Tensor) -> torch.Tensor:
    return -torch.log(torch.exp(-alpha) + torch.exp(alpha - 1)).mean()


def loss_density_reg(field: torch.nn.Module, body: BodyModel, n_points: int = 4096,
                     rng: np.random.Generator | None = None, margin: float = 0.05,
                     points: np.ndarray | None = None) -> torch.Tensor:
    """Mean density at canonical points that lie outside the body by more than ``margin``."""
    if points is None:
        rng = np.random.default_rng(0) if rng is None else rng
        b = field.bounds
        points = b.min + rng.random((n_points, 3)) * (b.max - b.min)
    keep = body.outside_far(points, margin)
    if not keep.any():
        return torch.zeros((), dtype=field.dtype)
    _, sigma = field(torch.as_tensor(points[keep], dtype=field.dtype))
    return sigma.mean()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    batch_size: int = 2048
    iterations: int = 5000
    lr_grid: float = 5e-3
    lr_decoder: float = 5e-4
    lr_pose: float = 1e-3  # joint optimization only
    lr_final_ratio: float = 0.05  # cosine decay floor
    w_rgb: float = 1.0
    w_alpha: float = 0.5
    w_layer: float = 0.01
    w_hard: float = 0.1
    w_density: float = 1e-2
    huber_delta: float = 0.1
    n_per_box: int = 64
    density_points: int = 4096
    joint_optimization: bool = False
    views: list[int] | None = None  # training views; all when None
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    eval_every: int = 0  # > 0 keeps the best iterate on a fixed evaluation batch
    eval_rays: int = 4096

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for f in dc_fields(self):
            if f.name.startswith(("w_", "lr")) and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.batch_size < 1 or self.n_per_box < 1:
            raise ValueError("batch_size and n_per_box must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


LOSS_TERMS = ("rgb", "alpha", "layer", "hard", "density")


@dataclass
class TrainResult:
    fields: list[CanonicalField]
    poses: list[list[PoseParams]]
    history: list[dict] = field(default_factory=list)
    best_iteration: int | None = None
    initial_objective: float | None = None  # evaluation-batch objective, when eval_every > 0
    best_objective: float | None = None

    def write_history(self, path) -> None:
        write_loss_csv(path, self.history)


def write_loss_csv(path, history: list[dict]) -> None:
    if not history:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        names = list(dict.fromkeys(k for row in history for k in row))  # some rows carry extra columns
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        w.writerows(history)


def cosine_factor(step: int, total: int, floor: float) -> float:
    if total <= 1:
        return 1.0
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * step / (total - 1)))


def make_fields(bodies: list[BodyModel], seed: int = 0, **kw) -> list[CanonicalField]:
    return [CanonicalField(b.canonical_bounds(), seed=seed + i, **kw) for i, b in enumerate(bodies)]


class _DivergenceGuard:
    def __init__(self, factor: float, patience: int):
        self.factor, self.patience = factor, patience
        self.initial = None
        self.count = 0

    def update(self, value: float, step: int) -> None:
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss at iteration {step}")
        if self.initial is None:
            self.initial = value
            return
        self.count = self.count + 1 if value > self.factor * self.initial else 0
        if self.count >= self.patience:
            raise DivergenceError(f"loss {value:.4g} stayed above {self.factor}x the initial "
                                  f"{self.initial:.4g} for {self.patience} iterations (iteration {step})")


def render_losses(out: RenderOutput, colors: torch.Tensor, masks: torch.Tensor, background,
                  cfg: TrainConfig) -> dict[str, torch.Tensor]:
    pred = out.with_background(background)
    return {
        "rgb": loss_rgb_train(pred, colors, cfg.huber_delta),
        "alpha": loss_alpha_train(out.alpha, masks),
        "layer": loss_layer(out.instance_alpha),
        "hard": loss_hard_surface(out.alpha),
    }


def train_avatars(scene: Scene, poses: list[list[PoseParams]], config: TrainConfig,
                  fields: list[CanonicalField] | None = None) -> TrainResult:
    """Fit one canonical field per person to the scene images.

    Poses stay fixed unless ``config.joint_optimization`` is set, in which case
    the raw pose parameters of every frame are optimized with the fields.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    bodies = scene.bodies
    fields = make_fields(bodies, cfg.seed) if fields is None else fields
    for fl in fields:
        fl.requires_grad_(True)
    dtype = fields[0].dtype if fields else torch.float32
    n_frames = len(poses)
    pose_vars = [[(torch.tensor(p.theta, dtype=torch.float64, requires_grad=cfg.joint_optimization),
                   torch.tensor(p.trans, dtype=torch.float64, requires_grad=cfg.joint_optimization))
                  for p in frame] for frame in poses]

    groups = [{"params": [f.grid for f in fields], "lr": cfg.lr_grid},
              {"params": [p for f in fields for p in f.decoder.parameters()], "lr": cfg.lr_decoder}]
    if cfg.joint_optimization:
        groups.append({"params": [t for frame in pose_vars for pair in frame for t in pair], "lr": cfg.lr_pose})
    opt = torch.optim.Adam(groups, eps=1e-15)
    base_lr = [g["lr"] for g in groups]

    def states_for(f: int, grad: bool) -> list[InstanceState]:
        with torch.set_grad_enabled(grad):
            return [instance_state(b, fl, th, tr) for b, fl, (th, tr) in zip(bodies, fields, pose_vars[f])]

    frozen_states = None if cfg.joint_optimization else [states_for(f, False) for f in range(n_frames)]
    pools = []
    for f in range(n_frames):
        sts = frozen_states[f] if frozen_states else states_for(f, False)
        # joint mode: poses move, so draw from every pixel near the initial boxes
        pad = 0.08 if frozen_states else 0.3
        pools.append(RayPool(scene, f, cfg.views, box_hit_select(scene, [s.box for s in sts], cfg.views, pad)))
    bg = torch.as_tensor(scene.background, dtype=dtype)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    history = []

    def evaluate() -> float:
        total = 0.0
        with torch.no_grad():
            for f in range(n_frames):
                erng = np.random.default_rng([cfg.seed, 104729, f])
                b = pools[f].sample(erng, cfg.eval_rays)
                sts = frozen_states[f] if frozen_states else states_for(f, False)
                o = render_plan(plan_rays(b.origins, b.dirs, sts, cfg.n_per_box, rng=erng, dtype=dtype), sts)
                t = render_losses(o, torch.as_tensor(b.colors, dtype=dtype), torch.as_tensor(b.masks, dtype=dtype),
                                  bg, cfg)
                t["density"] = sum(loss_density_reg(fl, bd, cfg.density_points, erng)
                                   for fl, bd in zip(fields, bodies)) / max(len(fields), 1)
                total += float(sum(getattr(cfg, f"w_{k}") * t[k] for k in LOSS_TERMS))
        return total

    keep_best = cfg.eval_every > 0
    if keep_best:
        best, best_it = evaluate(), 0
        initial = best
        best_state = _snapshot(fields, pose_vars)
    for it in range(cfg.iterations):
        scale = cosine_factor(it, cfg.iterations, cfg.lr_final_ratio)
        for g, lr in zip(opt.param_groups, base_lr):
            g["lr"] = lr * scale
        f = int(rng.integers(n_frames))
        states = frozen_states[f] if frozen_states else states_for(f, True)
        batch = pools[f].sample(rng, cfg.batch_size)
        plan = plan_rays(batch.origins, batch.dirs, states, cfg.n_per_box, rng=rng, dtype=dtype)
        out = render_plan(plan, states)
        terms = render_losses(out, torch.as_tensor(batch.colors, dtype=dtype),
                              torch.as_tensor(batch.masks, dtype=dtype), bg, cfg)
        terms["density"] = sum(loss_density_reg(fl, b, cfg.density_points, rng) for fl, b in zip(fields, bodies)) \
            / max(len(fields), 1)
        total = sum(getattr(cfg, f"w_{k}") * terms[k] for k in LOSS_TERMS)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        value = float(total.detach())
        # the hard-surface term is negative at its minimum; shift it so the guarded total is >= 0
        guard.update(value - cfg.w_hard * HARD_SURFACE_MIN, it)
        row = {"iteration": it, **{k: float(terms[k].detach()) for k in LOSS_TERMS}, "total": value}
        if keep_best and ((it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1):
            row["eval"] = evaluate()
            if row["eval"] < best:
                best, best_it = row["eval"], it + 1
                best_state = _snapshot(fields, pose_vars)
        history.append(row)
        if it % 100 == 0 or it == cfg.iterations - 1:
            log.info("train it %d total %.5f rgb %.5f alpha %.5f", it, value, row["rgb"], row["alpha"])
    if keep_best:
        _restore(best_state, fields, pose_vars)
    for fl in fields:
        fl.check_finite()
    out_poses = [[PoseParams(p.beta.copy(), th.detach().numpy().copy(), tr.detach().numpy().copy())
                  for p, (th, tr) in zip(frame, vars_)] for frame, vars_ in zip(poses, pose_vars)]
    if keep_best:
        return TrainResult(fields, out_poses, history, best_it, initial, best)
    return TrainResult(fields, out_poses, history)


def _snapshot(fields, pose_vars):
    return ([{k: v.detach().clone() for k, v in f.state_dict().items()} for f in fields],
            [[(th.detach().clone(), tr.detach().clone()) for th, tr in frame] for frame in pose_vars])


def _restore(state, fields, pose_vars) -> None:
    fstates, pstates = state
    for f, s in zip(fields, fstates):
        f.load_state_dict(s)
    with torch.no_grad():
        for frame, saved in zip(pose_vars, pstates):
            for (th, tr), (sth, s_tr) in zip(frame, saved):
                th.copy_(sth)
                tr.copy_(s_tr)


def load_train_config(path) -> TrainConfig:
    import tomli

    with open(path, "rb") as fh:
        d = tomli.load(fh)
    return TrainConfig.from_dict(d.get("train", d))


def config_dict(cfg) -> dict:
    return asdict(cfg)
