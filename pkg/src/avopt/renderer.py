"""Layered volume rendering of several articulated avatars.

Each instance is sampled inside its own bounding box, samples carry the
instance label, everything is sorted by depth and composited once. Rendering
is split in two stages:

* :func:`plan_rays` (no gradients) draws sample depths, sorts them, finds the
  nearest posed vertex of every sample and decides which samples can be
  skipped. These are the discrete choices that stay frozen within a step.
* :func:`render_plan` evaluates fields at the planned samples through the
  differentiable inverse skinning and composites.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .body import BodyModel, NearestVertex, inverse_lbs_torch
from .geometry import Aabb, CameraModel, Ray, pixel_centers, pixel_rays, ray_aabb_batch, ray_aabb_intersect

log = logging.getLogger(__name__)


class UnsortedSamplesError(ValueError):
    pass


@dataclass
class RaySample:
    position: np.ndarray
    depth: float
    interval: float
    label: int
    n_instances: int
    color: np.ndarray | None = None
    density: float = 0.0

    @property
    def onehot(self) -> np.ndarray:
        m = np.zeros(self.n_instances)
        m[self.label] = 1.0
        return m


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3), before background
    alpha: torch.Tensor  # (R,)
    instance_alpha: torch.Tensor  # (R, L)

    def with_background(self, background) -> torch.Tensor:
        bg = torch.as_tensor(background, dtype=self.color.dtype)
        return self.color + (1 - self.alpha)[:, None] * bg


# ---------------------------------------------------------------------------
# compositing


def composite_alphas(alphas: torch.Tensor, colors: torch.Tensor, labels: torch.Tensor,
                     n_instances: int) -> RenderOutput:
    """Front-to-back compositing of per-sample alphas, (R, S) layout sorted by depth.

    ``labels`` holds the instance index per sample; padding samples must have
    zero alpha (their label is ignored).
    """
    trans = torch.cumprod(torch.cat([torch.ones_like(alphas[:, :1]), 1 - alphas[:, :-1]], 1), 1)
    w = alphas * trans
    color = (w[..., None] * colors).sum(1)
    alpha = w.sum(1)
    if n_instances == 1:
        inst = w.sum(1, keepdim=True)
    else:
        onehot = torch.nn.functional.one_hot(labels.clamp(min=0), n_instances).to(w.dtype)
        inst = (w[..., None] * onehot).sum(1)
    return RenderOutput(color, alpha, inst)


def composite_batch(sigmas, deltas, colors, labels, n_instances) -> RenderOutput:
    alphas = 1 - torch.exp(-sigmas * deltas)
    return composite_alphas(alphas, colors, labels, n_instances)


def volume_render_reference(sigmas, deltas, colors) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain single-layer volume rendering: (color, opacity) per ray."""
    alphas = 1 - torch.exp(-sigmas * deltas)
    trans = torch.cumprod(torch.cat([torch.ones_like(alphas[:, :1]), 1 - alphas[:, :-1]], 1), 1)
    w = alphas * trans
    return (w[..., None] * colors).sum(1), w.sum(1)


def composite(samples: list[RaySample], check_sorted: bool = True) -> RenderOutput:
    """Composite a single ray's sample list (colors and densities filled)."""
    if not samples:
        return RenderOutput(torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                            torch.zeros(1, 0, dtype=torch.float64))
    depth = np.array([s.depth for s in samples])
    if check_sorted and np.any(np.diff(depth) < 0):
        raise UnsortedSamplesError("samples must be sorted by depth")
    L = samples[0].n_instances
    sig = torch.tensor([[s.density for s in samples]], dtype=torch.float64)
    dl = torch.tensor([[s.interval for s in samples]], dtype=torch.float64)
    col = torch.tensor(np.array([s.color for s in samples])[None], dtype=torch.float64)
    lab = torch.tensor([[s.label for s in samples]])
    return composite_batch(sig, dl, col, lab, L)


# ---------------------------------------------------------------------------
# sampling


def stratified_depths(t0, t1, n, jitter=None):
    """(R, n) depths in [t0, t1); midpoints when ``jitter`` is None."""
    u = 0.5 if jitter is None else jitter
    k = np.arange(n)
    return t0[:, None] + (k + u) * ((t1 - t0) / n)[:, None]


def sample_ray(ray: Ray, boxes: list[Aabb], n_per_box: int, rng: np.random.Generator | None = None
               ) -> list[RaySample]:
    """Stratified samples in every box the ray crosses, merged and sorted by depth."""
    if n_per_box < 1:
        raise ValueError("n_per_box must be >= 1")
    out = []
    for label, box in enumerate(boxes):
        hit = ray_aabb_intersect(ray, box)
        if hit is None:
            continue
        t0, t1 = hit
        jit = None if rng is None else rng.random(n_per_box)
        d = stratified_depths(np.array([t0]), np.array([t1]), n_per_box, jit)[0]
        iv = _own_intervals(d[None], np.array([t1 - t0]), n_per_box)[0]
        out += [RaySample(ray.point_at(t), float(t), float(w), label, len(boxes)) for t, w in zip(d, iv)]
    out.sort(key=lambda s: s.depth)
    return out


def _own_intervals(d, width, n):
    """Distance to the next sample of the same instance; last gets width / n."""
    iv = np.empty_like(d)
    iv[:, :-1] = np.diff(d, axis=1)
    iv[:, -1] = width / n
    return iv


class OccupancyMask:
    """Conservative voxel cover of a posed body and its ``margin`` neighbourhood.

    Voxels holding a vertex are closed by one voxel, their enclosed interior
    is filled, and the result is grown to cover ``margin``. Points in empty
    voxels are guaranteed to be outside the surface and farther than
    ``margin`` from every vertex, so the exact test can be skipped for them.
    """

    def __init__(self, vertices: np.ndarray, margin: float, voxel: float = 0.04):
        from scipy import ndimage

        grow = int(np.ceil(margin / voxel)) + 1
        self.voxel = voxel
        self.origin = vertices.min(0) - (grow + 2) * voxel
        shape = np.ceil((vertices.max(0) + (grow + 2) * voxel - self.origin) / voxel).astype(int) + 1
        occ = np.zeros(shape, dtype=bool)
        ijk = np.floor((vertices - self.origin) / voxel).astype(int)
        occ[tuple(ijk.T)] = True
        occ = ndimage.binary_dilation(occ, iterations=1)
        occ = ndimage.binary_fill_holes(occ)
        self.occ = ndimage.binary_dilation(occ, iterations=grow)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        ijk = np.floor((points - self.origin) / self.voxel).astype(int)
        ok = np.all((ijk >= 0) & (ijk < np.array(self.occ.shape)), 1)
        out = np.zeros(len(points), dtype=bool)
        out[ok] = self.occ[tuple(ijk[ok].T)]
        return out


@dataclass
class InstanceState:
    """Pose-dependent quantities of one instance for one evaluation."""

    body: BodyModel
    field: torch.nn.Module
    Minv: torch.Tensor  # (V, 3, 3) inverse blended skinning blocks
    offset: torch.Tensor  # (V, 3) blended translations
    vertices: np.ndarray  # posed vertices (detached)
    normals: np.ndarray  # posed vertex normals (detached)
    _occupancy: dict = None

    def occupancy(self, margin: float) -> OccupancyMask:
        if self._occupancy is None:
            self._occupancy = {}
        if margin not in self._occupancy:
            self._occupancy[margin] = OccupancyMask(self.vertices, margin)
        return self._occupancy[margin]

    @property
    def box(self) -> Aabb:
        return Aabb(self.vertices.min(0), self.vertices.max(0))


def instance_state(body: BodyModel, field, theta: torch.Tensor, trans: torch.Tensor) -> InstanceState:
    B = body.bone_transforms(theta, trans)
    Minv, off = body.inverse_vertex_transforms(B)
    with torch.no_grad():
        A = body.vertex_transforms(B)
        verts = (A[:, :3, :3] @ body.vertices[:, :, None])[..., 0] + A[:, :3, 3]
        nrm = (A[:, :3, :3] @ body.normals[:, :, None])[..., 0]
        nrm = nrm / nrm.norm(dim=1, keepdim=True)
    return InstanceState(body, field, Minv, off, verts.numpy(), nrm.numpy())


@dataclass
class RayPlan:
    points: torch.Tensor  # (R, S, 3) sorted by depth
    depths: np.ndarray  # (R, S), inf for padding
    deltas: torch.Tensor  # (R, S)
    labels: torch.Tensor  # (R, S), -1 for padding
    n_instances: int
    # per instance: flat sample indices into R*S and nearest vertex indices
    gather: list[tuple[torch.Tensor, torch.Tensor]]

    @property
    def n_rays(self) -> int:
        return self.points.shape[0]


def plan_rays(origins: np.ndarray, dirs: np.ndarray, states: list[InstanceState], n_per_box: int,
              padding: float = 0.08, rng: np.random.Generator | None = None,
              skip_distance: float | None = 0.06, dtype=torch.float64, workers: int = 1,
              search_radius: float = 0.25) -> RayPlan:
    """Sample every instance box along each ray and freeze the discrete choices.

    Samples outside the posed surface by more than ``skip_distance`` (judged
    by the nearest posed vertex and its normal) get zero density. With
    skipping on, the vertex search stops at ``search_radius``: a sample with
    no vertex that close is outside every limb and is skipped as well.
    """
    R, L, n = len(origins), len(states), n_per_box
    all_d = np.full((R, L * n), np.inf)
    all_iv = np.zeros((R, L * n))
    all_lab = np.full((R, L * n), -1, dtype=np.int64)
    for l, st in enumerate(states):
        box = st.box
        t0, t1 = ray_aabb_batch(origins, dirs, box.min - padding, box.max + padding)
        hit = t0 < t1
        if not hit.any():
            continue
        jit = None if rng is None else rng.random((int(hit.sum()), n))
        d = stratified_depths(t0[hit], t1[hit], n, jit)
        all_d[hit, l * n:(l + 1) * n] = d
        all_iv[hit, l * n:(l + 1) * n] = _own_intervals(d, t1[hit] - t0[hit], n)
        all_lab[hit, l * n:(l + 1) * n] = l
    order = np.argsort(all_d, axis=1, kind="stable")
    depth = np.take_along_axis(all_d, order, 1)
    iv = np.take_along_axis(all_iv, order, 1)
    lab = np.take_along_axis(all_lab, order, 1)
    # trim columns that are padding for every ray
    keep = int((lab >= 0).sum(1).max()) if R else 0
    depth, iv, lab = depth[:, :keep], iv[:, :keep], lab[:, :keep]
    finite_d = np.where(np.isfinite(depth), depth, 0.0)
    pts = origins[:, None, :] + finite_d[..., None] * dirs[:, None, :]

    gather = []
    flat_pts = pts.reshape(-1, 3)
    flat_lab = lab.reshape(-1)
    for l, st in enumerate(states):
        sel = np.nonzero(flat_lab == l)[0]
        if len(sel) == 0:
            gather.append((torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long)))
            continue
        p = flat_pts[sel]
        if skip_distance is None:
            dist, idx, _ = NearestVertex(st.vertices).query(p, workers=workers)
        else:
            near = st.occupancy(skip_distance)(p)
            sel, p = sel[near], p[near]
            dist, idx, far = NearestVertex(st.vertices).query(p, max(search_radius, skip_distance), workers)
            outward = ((p - st.vertices[idx]) * st.normals[idx]).sum(1) > 0
            live = ~(far | (outward & (dist > skip_distance)))
            sel, idx = sel[live], idx[live]
        gather.append((torch.as_tensor(sel), torch.as_tensor(idx)))
    return RayPlan(torch.as_tensor(pts, dtype=dtype), depth, torch.as_tensor(iv, dtype=dtype),
                   torch.as_tensor(lab), L, gather)


def evaluate_plan(plan: RayPlan, states: list[InstanceState]) -> tuple[torch.Tensor, torch.Tensor]:
    """Densities (R, S) and colors (R, S, 3) at the planned samples."""
    R, S = plan.labels.shape
    dtype = plan.points.dtype
    flat = plan.points.reshape(-1, 3)
    sig = torch.zeros(R * S, dtype=dtype)
    col = torch.zeros(R * S, 3, dtype=dtype)
    for st, (sel, idx) in zip(states, plan.gather):
        if len(sel) == 0:
            continue
        xbar = inverse_lbs_torch(flat[sel].to(st.Minv.dtype), st.Minv, st.offset, idx)
        c, s = st.field(xbar.to(_field_dtype(st.field)))
        sig = sig.index_put((sel,), s.to(dtype))
        col = col.index_put((sel,), c.to(dtype))
    return sig.reshape(R, S), col.reshape(R, S, 3)


def _field_dtype(field):
    return getattr(field, "dtype", torch.float64)


def render_plan(plan: RayPlan, states: list[InstanceState]) -> RenderOutput:
    if plan.labels.shape[1] == 0:
        R = plan.n_rays
        z = torch.zeros(R, dtype=plan.points.dtype)
        return RenderOutput(torch.zeros(R, 3, dtype=z.dtype), z, torch.zeros(R, plan.n_instances, dtype=z.dtype))
    sig, col = evaluate_plan(plan, states)
    return composite_batch(sig, plan.deltas, col, plan.labels, plan.n_instances)


def render_rays(origins, dirs, states, n_per_box=64, rng=None, chunk=4096, **kw) -> RenderOutput:
    outs = []
    for s in range(0, len(origins), chunk):
        plan = plan_rays(origins[s:s + chunk], dirs[s:s + chunk], states, n_per_box, rng=rng, **kw)
        outs.append(render_plan(plan, states))
    if not outs:
        z = torch.zeros(0, dtype=torch.float64)
        return RenderOutput(torch.zeros(0, 3, dtype=z.dtype), z, torch.zeros(0, len(states), dtype=z.dtype))
    return RenderOutput(torch.cat([o.color for o in outs]), torch.cat([o.alpha for o in outs]),
                        torch.cat([o.instance_alpha for o in outs]))


def render_image(camera: CameraModel, bodies: list[BodyModel], fields, poses, n_per_box: int = 64,
                 background=(0.0, 0.0, 0.0), chunk: int = 4096, **kw):
    """Render one view. Returns (image HxWx3, alpha HxW, instance alphas LxHxW) as numpy."""
    H, W = camera.height, camera.width
    L = len(bodies)
    if L == 0:
        img = np.broadcast_to(np.asarray(background, dtype=np.float64), (H, W, 3)).copy()
        return img, np.zeros((H, W)), np.zeros((0, H, W))
    with torch.no_grad():
        states = [instance_state(b, f, torch.as_tensor(p.theta, dtype=b.dtype), torch.as_tensor(p.trans, dtype=b.dtype))
                  for b, f, p in zip(bodies, fields, poses)]
        o, d = pixel_rays(camera, pixel_centers(camera))
        # only rays that meet some padded box need marching
        pad = kw.get("padding", 0.08)
        hit = np.zeros(len(o), dtype=bool)
        for st in states:
            t0, t1 = ray_aabb_batch(o, d, st.box.min - pad, st.box.max + pad)
            hit |= t0 < t1
        color = np.zeros((H * W, 3))
        alpha = np.zeros(H * W)
        inst = np.zeros((H * W, L))
        if hit.any():
            try:
                out = render_rays(o[hit], d[hit], states, n_per_box, chunk=chunk, **kw)
            except Exception as e:  # attach pixel context
                raise type(e)(f"while rendering {W}x{H} view: {e}") from e
            color[hit] = out.color.double().numpy()
            alpha[hit] = out.alpha.double().numpy()
            inst[hit] = out.instance_alpha.double().numpy()
    img = color + (1 - alpha)[:, None] * np.asarray(background, dtype=np.float64)
    return img.reshape(H, W, 3), alpha.reshape(H, W), inst.T.reshape(L, H, W)
