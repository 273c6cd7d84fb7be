"""Canonical radiance field: multiresolution feature grid plus a small decoder."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import _gridkernels
from .geometry import Aabb

_PRIMES = (1, 2654435761, 805459861)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class FieldSample:
    color: np.ndarray
    density: float


class _GridLookup(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, grid, field):
        u_np = u.detach().contiguous().numpy()
        g_np = grid.detach().numpy()
        out = np.zeros((len(u_np), len(field._res) * grid.shape[1]), dtype=g_np.dtype)
        _gridkernels.grid_forward(u_np.astype(g_np.dtype, copy=False), g_np, field.level_offsets,
                                  field._res, field._dense, field._sizes, field.smooth, out)
        ctx.save_for_backward(u, grid)
        ctx.field = field
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        u, grid = ctx.saved_tensors
        field = ctx.field
        want_u, want_grid = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        g_np = grid.detach().numpy()
        u_np = u.detach().contiguous().numpy().astype(g_np.dtype, copy=False)
        grad_grid = np.zeros_like(g_np) if want_grid else np.zeros((1, 1), g_np.dtype)
        grad_u = np.zeros_like(u_np) if want_u else np.zeros((1, 3), g_np.dtype)
        go = grad_out.detach().contiguous().numpy().astype(g_np.dtype, copy=False)
        _gridkernels.grid_backward(u_np, g_np, field.level_offsets, field._res, field._dense,
                                   field._sizes, field.smooth, go, grad_grid, grad_u, want_grid, want_u)
        return (torch.from_numpy(grad_u).to(u.dtype) if want_u else None,
                torch.from_numpy(grad_grid) if want_grid else None, None)


class CanonicalField(nn.Module):
    """Per-person field mapping canonical points to (color, density).

    Level resolutions grow geometrically from ``base_res`` to ``max_res``.
    A level is stored densely while its vertex count fits in ``table_size``
    and in a spatial hash table of that size otherwise.

    ``interpolation="smoothstep"`` (default) blends the eight cell corners
    with smoothstepped trilinear weights, which keeps the field continuously
    differentiable across cell faces; ``"linear"`` is plain trilinear. The
    decoder uses SiLU for the same reason.
    """

    def __init__(self, bounds: Aabb, n_levels: int = 8, n_features: int = 2, base_res: int = 16,
                 max_res: int = 256, table_size: int = 2 ** 19, hidden: int = 64,
                 dtype=torch.float32, seed: int = 0, interpolation: str = "smoothstep"):
        super().__init__()
        if interpolation not in ("smoothstep", "linear"):
            raise ValueError(f"unknown interpolation {interpolation!r}")
        self.interpolation = interpolation
        self.smooth = interpolation == "smoothstep"
        self.bounds = bounds
        self.register_buffer("lo", torch.as_tensor(bounds.min, dtype=dtype))
        self.register_buffer("hi", torch.as_tensor(bounds.max, dtype=dtype))
        self.n_features = n_features
        self.table_size = table_size
        self.hidden = hidden
        growth = math.exp(math.log(max_res / base_res) / max(n_levels - 1, 1))
        self.level_specs = []
        for level in range(n_levels):
            res = int(math.floor(base_res * growth ** level + 1e-9))
            dense = (res + 1) ** 3 <= table_size
            self.level_specs.append({"res": res, "dense": dense,
                                     "size": (res + 1) ** 3 if dense else table_size})
        sizes = [spec["size"] for spec in self.level_specs]
        self.level_offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._res = np.array([spec["res"] for spec in self.level_specs], dtype=np.int64)
        self._dense = np.array([spec["dense"] for spec in self.level_specs], dtype=np.bool_)
        self._sizes = np.array(sizes, dtype=np.int64)
        g = torch.Generator().manual_seed(seed)
        self.grid = nn.Parameter((torch.rand(sum(sizes), n_features, generator=g, dtype=dtype) * 2 - 1) * 1e-4)
        dims = [n_levels * n_features, hidden, hidden, 4]
        layers = []
        for i in range(3):
            lin = nn.Linear(dims[i], dims[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(dims[i])
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=g)
                lin.bias.uniform_(-bound, bound, generator=g)
            layers += [lin, nn.SiLU()] if i < 2 else [lin]
        self.decoder = nn.Sequential(*layers)

    @property
    def dtype(self):
        return self.lo.dtype

    def encode(self, u: torch.Tensor) -> torch.Tensor:
        """Trilinear features of normalized points ``u`` in [0, 1]^3, (N, levels * F)."""
        return _GridLookup.apply(u, self.grid, self)

    def level_slices(self) -> dict[str, slice]:
        """Row ranges of each level inside ``grid``."""
        return {f"level{i}": slice(int(o), int(o + n)) for i, (o, n) in
                enumerate(zip(self.level_offsets, self._sizes))}

    def forward(self, xbar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Colors (N, 3) and densities (N,); zero outside the canonical bounds."""
        u = (xbar - self.lo) / (self.hi - self.lo)
        inside = torch.all((u >= 0) & (u <= 1), -1)
        color = xbar.new_zeros(len(xbar), 3)
        sigma = xbar.new_zeros(len(xbar))
        if not bool(inside.any()):
            return color, sigma
        idx = torch.nonzero(inside)[:, 0]
        raw = self.decoder(self.encode(u[idx]))
        color = color.index_put((idx,), torch.sigmoid(raw[:, :3]))
        sigma = sigma.index_put((idx,), F.softplus(raw[:, 3]))
        return color, sigma

    def raw_density(self, xbar: torch.Tensor) -> torch.Tensor:
        """Softplus density without the bounds clipping (for regularizers)."""
        u = (xbar - self.lo) / (self.hi - self.lo)
        return F.softplus(self.decoder(self.encode(u.clamp(0, 1)))[:, 3])

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.all(torch.isfinite(p)):
                raise NonFiniteError(f"non-finite parameter block {name}")


def query(field: CanonicalField, xbar) -> FieldSample:
    field.check_finite()
    x = torch.as_tensor(np.asarray(xbar, dtype=np.float64).reshape(1, 3), dtype=field.dtype)
    with torch.no_grad():
        c, s = field(x)
    return FieldSample(c[0].double().numpy(), float(s[0]))


def query_posed(field, x, pose, body) -> FieldSample:
    """Field value at posed point ``x`` for ``body`` (a BodyModel) in ``pose``."""
    from .body import NearestVertex, inverse_lbs_torch

    field.check_finite() if hasattr(field, "check_finite") else None
    with torch.no_grad():
        B = body.bone_transforms(torch.as_tensor(pose.theta, dtype=body.dtype),
                                 torch.as_tensor(pose.trans, dtype=body.dtype))
        verts = body.deform(B)
        Minv, b = body.inverse_vertex_transforms(B)
        pts = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(1, 3), dtype=body.dtype)
        _, idx, _ = NearestVertex(verts.numpy()).query(pts.numpy())
        xbar = inverse_lbs_torch(pts, Minv, b, torch.as_tensor(idx))
        c, s = field(xbar.to(field.dtype))
    return FieldSample(c[0].double().numpy(), float(s[0]))


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, float32 LE blocks

_FIELD_MAGIC = b"AVOPTFLD-v1\n"


def save_field(path, field: CanonicalField) -> None:
    blocks, offset, entries = [], 0, []
    for name, t in field.state_dict().items():
        if name in ("lo", "hi"):
            continue
        b = t.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blocks.append(b)
        offset += len(b)
    header = {
        "levels": field.level_specs,
        "n_features": field.n_features,
        "table_size": field.table_size,
        "decoder": [field.n_features * len(field.level_specs), field.hidden, field.hidden, 4],
        "interpolation": field.interpolation,
        "bounds": [field.bounds.min.tolist(), field.bounds.max.tolist()],
        "blocks": entries,
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_FIELD_MAGIC + struct.pack("<Q", len(hb)) + hb)
        for b in blocks:
            f.write(b)


def load_field(path, dtype=torch.float32) -> CanonicalField:
    raw = Path(path).read_bytes()
    if not raw.startswith(_FIELD_MAGIC):
        raise ValueError(f"{path}: not a field checkpoint (bad magic)")
    n = len(_FIELD_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[n:n + 8])
    header = json.loads(raw[n + 8:n + 8 + hlen])
    base = n + 8 + hlen
    levels = header["levels"]
    field = CanonicalField(
        Aabb(*map(np.array, header["bounds"])), n_levels=len(levels), n_features=header["n_features"],
        base_res=levels[0]["res"], max_res=levels[-1]["res"], table_size=header["table_size"],
        hidden=header["decoder"][1], dtype=dtype, interpolation=header.get("interpolation", "smoothstep"),
    )
    state = field.state_dict()
    for e in header["blocks"]:
        count = int(np.prod(e["shape"]))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=base + e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.as_tensor(a.copy(), dtype=dtype)
    field.load_state_dict(state)
    return field
