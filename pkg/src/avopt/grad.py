"""Gradient plumbing: named parameter blocks, gradients, finite-difference checks.

Reverse mode comes from torch autograd. Every discrete choice in the pipeline
(nearest vertex, sample order, skip mask, collision membership) is frozen by
the caller before building an objective, so the objective is a smooth
function of the registered parameters and central differences apply.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode


class NonFiniteGradientError(FloatingPointError):
    """A non-finite value appeared; ``node`` names the operation that produced it."""

    def __init__(self, node: str, phase: str):
        super().__init__(f"non-finite value produced by {node} during {phase}")
        self.node = node
        self.phase = phase


@dataclass
class _Block:
    name: str
    tensor: torch.Tensor
    rows: slice | None  # row range of the tensor, None for all of it

    def view(self) -> torch.Tensor:
        return self.tensor if self.rows is None else self.tensor[self.rows]

    @property
    def size(self) -> int:
        return self.view().numel()


class ParamVector:
    """Flat view over named tensor blocks.

    Blocks may be row ranges of a shared tensor (the levels of a feature
    grid). Slices are disjoint and cover the flat array in registration order.
    """

    def __init__(self):
        self._blocks: list[_Block] = []
        self.registry: dict[str, slice] = {}
        self._n = 0

    def add(self, name: str, tensor: torch.Tensor, rows: slice | None = None) -> "ParamVector":
        if name in self.registry:
            raise ValueError(f"duplicate block name {name!r}")
        b = _Block(name, tensor, rows)
        self._blocks.append(b)
        self.registry[name] = slice(self._n, self._n + b.size)
        self._n += b.size
        return self

    def add_module(self, prefix: str, module: torch.nn.Module) -> "ParamVector":
        """Register every parameter of ``module``; feature grids split by level."""
        for pname, p in module.named_parameters():
            if pname == "grid" and hasattr(module, "level_slices"):
                for lname, rows in module.level_slices().items():
                    self.add(f"{prefix}.{lname}", p, rows)
            else:
                self.add(f"{prefix}.{pname}", p)
        return self

    def __len__(self) -> int:
        return self._n

    @property
    def names(self) -> list[str]:
        return [b.name for b in self._blocks]

    def tensors(self) -> list[torch.Tensor]:
        seen, out = set(), []
        for b in self._blocks:
            if id(b.tensor) not in seen:
                seen.add(id(b.tensor))
                out.append(b.tensor)
        return out

    def get(self) -> np.ndarray:
        return np.concatenate([b.view().detach().double().reshape(-1).numpy() for b in self._blocks]) \
            if self._blocks else np.zeros(0)

    def set(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self._n,):
            raise ValueError(f"expected {self._n} values, got shape {flat.shape}")
        with torch.no_grad():
            for b in self._blocks:
                v = b.view()
                v.copy_(torch.as_tensor(flat[self.registry[b.name]], dtype=v.dtype).reshape(v.shape))

    def _block_at(self, k: int) -> tuple[_Block, tuple]:
        for b in self._blocks:
            s = self.registry[b.name]
            if s.start <= k < s.stop:
                return b, np.unravel_index(k - s.start, tuple(b.view().shape))
        raise IndexError(k)

    def coord(self, k: int) -> float:
        b, ix = self._block_at(k)
        return float(b.view().detach()[ix])

    def put(self, k: int, value: float) -> None:
        """Overwrite flat coordinate ``k`` in place."""
        b, ix = self._block_at(k)
        with torch.no_grad():
            b.view()[ix] = value

    def gather_grad(self) -> np.ndarray:
        out = np.zeros(self._n)
        for b in self._blocks:
            t = b.tensor
            if t.grad is None:
                continue
            g = t.grad if b.rows is None else t.grad[b.rows]
            out[self.registry[b.name]] = g.detach().double().reshape(-1).numpy()
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


class _FirstNonFinite(TorchDispatchMode):
    """Records the first aten op whose floating output is not finite."""

    def __init__(self):
        super().__init__()
        self.node: str | None = None

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.node is None:
            for t in out if isinstance(out, (tuple, list)) else (out,):
                if isinstance(t, torch.Tensor) and t.is_floating_point() and t.numel() \
                        and not bool(torch.isfinite(t).all()):
                    self.node = str(func.overloadpacket.__name__)
                    break
        return out


def _locate_forward(objective, params) -> str:
    mode = _FirstNonFinite()
    with torch.no_grad(), mode:
        objective(params)
    return mode.node or "objective (non-tensor code)"


def _locate_backward(objective, params) -> str:
    params.zero_grad()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            with torch.autograd.detect_anomaly(check_nan=True):
                objective(params).backward()
    except RuntimeError as e:
        msg = str(e)
        if "Function '" in msg:
            return msg.split("Function '")[1].split("'")[0]
        return msg.splitlines()[0]
    return "gradient accumulation"


def grad(objective: Callable[[ParamVector], torch.Tensor], params: ParamVector) -> tuple[float, np.ndarray]:
    """Value and exact reverse-mode gradient of ``objective`` at the current parameters.

    Every block is differentiated, whatever its ``requires_grad`` flag; the
    flags are restored afterwards.
    """
    flags = [(t, t.requires_grad) for t in params.tensors()]
    for t, _ in flags:
        t.requires_grad_(True)
    try:
        params.zero_grad()
        value = objective(params)
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteGradientError(_locate_forward(objective, params), "forward")
        if value.requires_grad:
            value.backward()
        g = params.gather_grad()
        params.zero_grad()
    finally:
        for t, f in flags:
            t.requires_grad_(f)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(_locate_backward(objective, params), "backward")
    return float(value.detach()), g


@dataclass
class GradReport:
    h: float
    errors: dict[str, float] = field(default_factory=dict)  # block -> max relative error
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol

    def to_json(self) -> str:
        return json.dumps({"h": self.h, "max_error": self.max_error, "errors": self.errors,
                           "n_checked": self.n_checked}, indent=1)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float, floor: float = 1e-3) -> np.ndarray:
    """|a - f| / max(|a|, |f|, floor * scale); the floor keeps near-zero entries from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, 1e-300))
    return np.abs(analytic - numeric) / denom


def _filter(block_filter) -> Callable[[str], bool]:
    if block_filter is None:
        return lambda name: True
    if callable(block_filter):
        return block_filter
    wanted = set(block_filter)
    return lambda name: name in wanted


def _pick(rng: np.random.Generator, idx: np.ndarray, nonzero: np.ndarray, n_coords: int) -> np.ndarray:
    """Up to ``n_coords`` of ``idx``: three quarters from ``nonzero`` entries, the rest uniform."""
    nz = idx[nonzero]
    n_nz = min(len(nz), int(math.ceil(0.75 * n_coords)))
    pick = list(rng.choice(nz, n_nz, replace=False)) if n_nz else []
    rest = np.setdiff1d(idx, pick)
    pick += list(rng.choice(rest, min(len(rest), n_coords - len(pick)), replace=False))
    return np.array(sorted(pick), dtype=np.int64)


def _central(values: Callable[[ParamVector], np.ndarray], params: ParamVector, k: int, h: float) -> np.ndarray:
    x0 = params.coord(k)
    params.put(k, x0 + h)
    fp = values(params)
    params.put(k, x0 - h)
    fm = values(params)
    params.put(k, x0)
    return (fp - fm) / (2 * h)


def fd_check(objective: Callable[[ParamVector], torch.Tensor], params: ParamVector,
             block_filter: Callable[[str], bool] | Iterable[str] | None = None, h: float = 1e-4,
             n_coords: int = 64, seed: int = 0, floor: float = 1e-3) -> GradReport:
    """Central differences on up to ``n_coords`` coordinates per block against :func:`grad`.

    Three quarters of the sampled coordinates come from entries with nonzero
    analytic gradient (sparse grid levels would otherwise be checked mostly at
    trivially zero entries), the rest uniformly.
    """
    reports = fd_check_terms(lambda pv: {"f": objective(pv)}, params, block_filter, h, n_coords, seed, floor)
    return reports["f"]


def fd_check_terms(objectives: Callable[[ParamVector], dict[str, torch.Tensor]], params: ParamVector,
                   block_filter: Callable[[str], bool] | Iterable[str] | None = None, h: float = 1e-4,
                   n_coords: int = 64, seed: int = 0, floor: float = 1e-3) -> dict[str, GradReport]:
    """:func:`fd_check` for several scalar terms sharing one forward pass.

    Coordinates are drawn once per block from entries where any term has a
    nonzero gradient, and every perturbed evaluation yields all terms.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    keep = _filter(block_filter)
    rng = np.random.default_rng(seed)
    names = list(objectives(params).keys())
    grads = {t: grad(lambda pv, t=t: objectives(pv)[t], params)[1] for t in names}

    def values(pv):
        with torch.no_grad():
            out = objectives(pv)
        return np.array([float(out[t]) for t in names])

    reports = {t: GradReport(h) for t in names}
    for name, sl in params.registry.items():
        if not keep(name):
            continue
        idx = np.arange(sl.start, sl.stop)
        nonzero = np.any([grads[t][idx] != 0 for t in names], axis=0)
        pick = _pick(rng, idx, nonzero, n_coords)
        if len(pick) == 0:
            continue
        fd = np.stack([_central(values, params, int(k), h) for k in pick])
        for j, t in enumerate(names):
            g = grads[t]
            scale = float(np.max(np.abs(g[idx])))
            reports[t].errors[name] = float(relative_errors(g[pick], fd[:, j], scale, floor).max())
            reports[t].n_checked[name] = len(pick)
    return reports
