"""Simplified articulated body with the SMPL interface.

24 joints, a 72-dim axis-angle pose, 10 linear shape coefficients and a root
translation. The surface is a union of capsules (one or more per bone) sampled
to roughly 2000 vertices with smooth skinning weights. Canonical frame: pelvis
at the origin, y up, the body faces +z, left side on +x, T-pose.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import Aabb

log = logging.getLogger(__name__)

N_JOINTS = 24
N_BETAS = 10

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
]
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],
    [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00],
    [0.00, 0.11, -0.01],
    [0.10, -0.47, 0.00], [-0.10, -0.47, 0.00],
    [0.00, 0.24, 0.00],
    [0.09, -0.87, -0.03], [-0.09, -0.87, -0.03],
    [0.00, 0.30, 0.02],
    [0.11, -0.93, 0.09], [-0.11, -0.93, 0.09],
    [0.00, 0.50, 0.00],
    [0.08, 0.42, 0.00], [-0.08, 0.42, 0.00],
    [0.00, 0.57, 0.04],
    [0.18, 0.45, 0.00], [-0.18, 0.45, 0.00],
    [0.44, 0.45, 0.00], [-0.44, 0.45, 0.00],
    [0.70, 0.45, 0.00], [-0.70, 0.45, 0.00],
    [0.78, 0.45, 0.00], [-0.78, 0.45, 0.00],
])

# (start joint, end joint or -1, end offset for leaf extensions, radius)
_SEGMENTS = [
    (0, 1, None, 0.10), (0, 2, None, 0.10), (0, 3, None, 0.12),
    (3, 6, None, 0.125), (6, 9, None, 0.13), (9, 12, None, 0.12),
    (9, 13, None, 0.06), (9, 14, None, 0.06), (13, 16, None, 0.055), (14, 17, None, 0.055),
    (12, 15, None, 0.05), (15, -1, (0.0, 0.12, 0.0), 0.10),
    (1, 4, None, 0.075), (2, 5, None, 0.075), (4, 7, None, 0.055), (5, 8, None, 0.055),
    (7, 10, None, 0.045), (8, 11, None, 0.045),
    (16, 18, None, 0.05), (17, 19, None, 0.05), (18, 20, None, 0.04), (19, 21, None, 0.04),
    (20, 22, None, 0.035), (21, 23, None, 0.035),
    (22, -1, (0.06, 0.0, 0.0), 0.035), (23, -1, (-0.06, 0.0, 0.0), 0.035),
]

LEFT_ARM = [16, 18, 20, 22]
RIGHT_ARM = [17, 19, 21, 23]
LEFT_LEG = [4, 7, 10]
RIGHT_LEG = [5, 8, 11]

# Hinge components of the elbows (y axis) and knees (x axis). The sign turns
# each component into a coordinate whose positive side is hyper-extension.
PRIOR_JOINT_INDICES = np.array([18 * 3 + 1, 19 * 3 + 1, 4 * 3 + 0, 5 * 3 + 0])
PRIOR_JOINT_SIGNS = np.array([1.0, -1.0, -1.0, -1.0])


class SingularSkinningError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTemplate:
    parents: np.ndarray
    rest_joints: np.ndarray
    template_vertices: np.ndarray
    vertex_normals: np.ndarray
    skinning_weights: np.ndarray
    shape_dirs: np.ndarray  # (V, 3, 10)
    joint_shape_dirs: np.ndarray  # (n_b, 3, 10)
    prior_joint_indices: np.ndarray
    prior_joint_signs: np.ndarray
    segment_start: np.ndarray
    segment_end: np.ndarray  # -1 for leaf extensions
    segment_offset: np.ndarray
    segment_radius: np.ndarray
    segment_radius_dirs: np.ndarray  # (S, 10)

    def __post_init__(self):
        p = self.parents
        if p[0] != -1 or np.any(p[1:] < 0) or np.any(p[1:] >= np.arange(1, len(p))):
            raise ValueError("parents must form a tree rooted at joint 0 in topological order")
        if not np.allclose(self.skinning_weights.sum(1), 1.0, atol=1e-9):
            raise ValueError("skinning rows must sum to 1")
        if np.any(self.skinning_weights < 0):
            raise ValueError("skinning weights must be nonnegative")
        if len(self.prior_joint_indices) == 0:
            raise ValueError("prior joint index set must be nonempty")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def segment_owner(self) -> np.ndarray:
        return self.segment_start


@dataclass
class PoseParams:
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETAS))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3 * N_JOINTS))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.trans))):
            raise ValueError("pose parameters must be finite")

    def copy(self) -> "PoseParams":
        return PoseParams(self.beta.copy(), self.theta.copy(), self.trans.copy())

    def to_dict(self, person_id: int | None = None) -> dict:
        d = {"beta": self.beta.tolist(), "theta": self.theta.tolist(), "trans": self.trans.tolist()}
        if person_id is not None:
            d = {"person_id": person_id, **d}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        return cls(d["beta"], d["theta"], d["trans"])


@dataclass(frozen=True)
class BoneTransforms:
    matrices: np.ndarray  # (n_b, 4, 4)

    def __post_init__(self):
        R = self.matrices[:, :3, :3]
        eye = np.broadcast_to(np.eye(3), R.shape)
        if not np.allclose(R @ np.swapaxes(R, 1, 2), eye, atol=1e-9):
            raise ValueError("bone rotations must be orthonormal")


# ---------------------------------------------------------------------------
# template construction


def _segment_frame(axis):
    a = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(a, ref)
    u /= np.linalg.norm(u)
    return a, u, np.cross(a, u)


def capsule_sdf_np(points, starts, ends, radii):
    """(N, S) signed distance of points to each capsule."""
    ab = ends - starts
    ap = points[:, None, :] - starts[None]
    t = np.clip((ap * ab[None]).sum(-1) / (ab * ab).sum(-1)[None], 0.0, 1.0)
    closest = starts[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1) - radii[None]


def _sample_capsule(a, b, r, density):
    axis = b - a
    length = np.linalg.norm(axis)
    ax, u, v = _segment_frame(axis)
    n_around = max(8, int(round(2 * np.pi * r * np.sqrt(density))))
    n_along = max(2, int(round(length * np.sqrt(density))) + 1)
    pts, nrm = [], []
    phis = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    for s in np.linspace(0, 1, n_along):
        for phi in phis:
            n = np.cos(phi) * u + np.sin(phi) * v
            pts.append(a + s * axis + r * n)
            nrm.append(n)
    n_cap = max(6, int(round(2 * np.pi * r * r * density)))
    golden = np.pi * (3 - np.sqrt(5))
    for center, sign in ((a, -1.0), (b, 1.0)):
        for k in range(n_cap):
            z = 1 - (k + 0.5) / n_cap  # hemisphere height in (0, 1]
            rho = np.sqrt(1 - z * z)
            phi = k * golden
            n = sign * z * ax + rho * (np.cos(phi) * u + np.sin(phi) * v)
            pts.append(center + r * n)
            nrm.append(n)
    return np.array(pts), np.array(nrm)


def make_template(density: float = 950.0, blend_width: float = 0.02) -> SkeletonTemplate:
    """Build the capsule surrogate body (about 2000 surface vertices)."""
    J = REST_JOINTS.astype(np.float64)
    starts = np.array([J[s] for s, _, _, _ in _SEGMENTS])
    ends = np.array([J[e] if e >= 0 else J[s] + np.array(off) for s, e, off, _ in _SEGMENTS])
    radii = np.array([r for *_, r in _SEGMENTS])
    owners = np.array([s for s, *_ in _SEGMENTS])

    verts, normals = [], []
    for k in range(len(_SEGMENTS)):
        p, n = _sample_capsule(starts[k], ends[k], radii[k], density)
        sdf = capsule_sdf_np(p, starts, ends, radii)
        sdf[:, k] = np.inf
        keep = sdf.min(1) > -2e-3  # drop points buried inside other capsules
        verts.append(p[keep])
        normals.append(n[keep])
    V = np.concatenate(verts)
    N = np.concatenate(normals)

    sdf = np.maximum(capsule_sdf_np(V, starts, ends, radii), 0.0)
    seg_w = np.exp(-0.5 * (sdf / blend_width) ** 2)
    W = np.zeros((len(V), N_JOINTS))
    for k, o in enumerate(owners):
        W[:, o] += seg_w[:, k]
    W[W < 1e-4 * W.max(1, keepdims=True)] = 0.0
    W /= W.sum(1, keepdims=True)

    # shape space: per-joint translations, per-vertex radial offsets
    D = np.zeros((N_JOINTS, 3, N_BETAS))
    D[:, :, 0] = 0.05 * J
    for side, sgn in ((LEFT_LEG, 1), (RIGHT_LEG, -1)):
        D[side[0], 1, 2] = -0.02
        for j in side[1:]:
            D[j, 1, 2] = -0.04
        for j in side:
            D[j, 0, 6] = 0.015 * sgn
    for side, sgn in ((LEFT_ARM, 1), (RIGHT_ARM, -1)):
        D[side[1], 0, 3] = 0.02 * sgn
        for j in side[2:]:
            D[j, 0, 3] = 0.04 * sgn
        for j in side:
            D[j, 0, 5] = 0.02 * sgn
    D[[13], 0, 5] = 0.01
    D[[14], 0, 5] = -0.01
    D[[1], 0, 6] = 0.015
    D[[2], 0, 6] = -0.015
    D[6, 1, 4] = 0.01
    D[9, 1, 4] = 0.02
    for j in [12, 13, 14, 15, *LEFT_ARM, *RIGHT_ARM]:
        D[j, 1, 4] = 0.03

    S = np.einsum("vj,jkb->vkb", W, D)
    S[:, :, 0] = 0.05 * V
    S[:, :, 1] = 0.01 * N
    head_w = W[:, 15:16]
    S[:, :, 7] = 0.1 * head_w * (V - (J[15] + np.array([0.0, 0.06, 0.0])))
    arm_w = W[:, LEFT_ARM + RIGHT_ARM].sum(1, keepdims=True)
    leg_w = W[:, LEFT_LEG + RIGHT_LEG + [1, 2]].sum(1, keepdims=True)
    S[:, :, 8] = 0.008 * arm_w * N
    S[:, :, 9] = 0.01 * leg_w * N

    RD = np.zeros((len(_SEGMENTS), N_BETAS))
    RD[:, 0] = 0.05 * radii
    RD[:, 1] = 0.01
    for k, (s, e, _, _) in enumerate(_SEGMENTS):
        if s == 15 and e < 0:
            RD[k, 7] = 0.1 * radii[k]
        if s in LEFT_ARM + RIGHT_ARM:
            RD[k, 8] = 0.008
        if s in [1, 2] + LEFT_LEG + RIGHT_LEG:
            RD[k, 9] = 0.01

    return SkeletonTemplate(
        parents=PARENTS.copy(),
        rest_joints=J,
        template_vertices=V,
        vertex_normals=N,
        skinning_weights=W,
        shape_dirs=S,
        joint_shape_dirs=D,
        prior_joint_indices=PRIOR_JOINT_INDICES.copy(),
        prior_joint_signs=PRIOR_JOINT_SIGNS.copy(),
        segment_start=owners,
        segment_end=np.array([e for _, e, _, _ in _SEGMENTS]),
        segment_offset=np.array([off if off is not None else (0.0, 0.0, 0.0) for _, _, off, _ in _SEGMENTS],
                                dtype=np.float64),
        segment_radius=radii,
        segment_radius_dirs=RD,
    )


_DEFAULT_TEMPLATE: SkeletonTemplate | None = None


def default_template() -> SkeletonTemplate:
    global _DEFAULT_TEMPLATE
    if _DEFAULT_TEMPLATE is None:
        _DEFAULT_TEMPLATE = make_template()
    return _DEFAULT_TEMPLATE


# ---------------------------------------------------------------------------
# serialization: magic, u64 header length, JSON header, little-endian payload

_TEMPLATE_MAGIC = b"AVOPTTPL\x01"


def save_template(path, template: SkeletonTemplate) -> None:
    arrays = {}
    for name in template.__dataclass_fields__:
        a = np.asarray(getattr(template, name))
        arrays[name] = a.astype("<i8") if np.issubdtype(a.dtype, np.integer) else a.astype("<f8")
    header, offset, blobs = {"arrays": {}}, 0, []
    for name, a in arrays.items():
        b = a.tobytes()
        header["arrays"][name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset}
        blobs.append(b)
        offset += len(b)
    header["counts"] = {"joints": template.n_joints, "vertices": template.n_vertices}
    hb = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_TEMPLATE_MAGIC + struct.pack("<Q", len(hb)) + hb)
        for b in blobs:
            f.write(b)


def load_template(path) -> SkeletonTemplate:
    raw = Path(path).read_bytes()
    if not raw.startswith(_TEMPLATE_MAGIC):
        raise ValueError(f"{path}: not a template file")
    n = len(_TEMPLATE_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[n:n + 8])
    header = json.loads(raw[n + 8:n + 8 + hlen])
    base = n + 8 + hlen
    kw = {}
    for name, spec in header["arrays"].items():
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(raw, dtype=dt, count=count, offset=base + spec["offset"])
        kw[name] = a.reshape(spec["shape"]).astype(np.int64 if dt.kind == "i" else np.float64)
    return SkeletonTemplate(**kw)


# ---------------------------------------------------------------------------
# differentiable core


def batch_rodrigues(rvec: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3), smooth at zero."""
    a2 = (rvec * rvec).sum(-1, keepdim=True)[..., None]
    small = a2 < 1e-8
    a2_safe = torch.where(small, torch.ones_like(a2), a2)
    a = torch.sqrt(a2_safe)
    A = torch.where(small, 1 - a2 / 6, torch.sin(a) / a)
    B = torch.where(small, 0.5 - a2 / 24, (1 - torch.cos(a)) / a2_safe)
    x, y, z = rvec.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*rvec.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=rvec.dtype).expand_as(K)
    return eye + A * K + B * (K @ K)


class BodyModel:
    """A template with a fixed shape, evaluated with torch."""

    def __init__(self, template: SkeletonTemplate, beta=None, dtype=torch.float64):
        self.template = template
        self.dtype = dtype
        beta = np.zeros(N_BETAS) if beta is None else np.asarray(beta, dtype=np.float64)
        self.beta = beta
        verts, joints = shape_blend(template, beta)
        self.vertices = torch.as_tensor(verts, dtype=dtype)
        self.normals = torch.as_tensor(template.vertex_normals, dtype=dtype)
        self.joints_rest = torch.as_tensor(joints, dtype=dtype)
        self.weights = torch.as_tensor(template.skinning_weights, dtype=dtype)
        self.parents = template.parents.tolist()
        self._canon_tree = None

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def global_transforms(self, theta: torch.Tensor) -> torch.Tensor:
        """World transforms of the joint frames before removing rest joints (n_b, 4, 4)."""
        R = batch_rodrigues(theta.reshape(-1, 3))
        J = self.joints_rest
        G = []
        for i, p in enumerate(self.parents):
            off = J[i] if p < 0 else J[i] - J[p]
            top = torch.cat([R[i], off[:, None]], 1)
            local = torch.cat([top, torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=theta.dtype)], 0)
            G.append(local if p < 0 else G[p] @ local)
        return torch.stack(G)

    def bone_transforms(self, theta: torch.Tensor, trans: torch.Tensor) -> torch.Tensor:
        G = self.global_transforms(theta)
        rot = G[:, :3, :3]
        t = G[:, :3, 3] - (rot @ self.joints_rest[:, :, None])[..., 0] + trans
        top = torch.cat([rot, t[:, :, None]], 2)
        bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=theta.dtype).expand(len(top), 1, 4)
        return torch.cat([top, bottom], 1)

    def joints(self, theta: torch.Tensor, trans: torch.Tensor) -> torch.Tensor:
        return self.global_transforms(theta)[:, :3, 3] + trans

    def vertex_transforms(self, B: torch.Tensor) -> torch.Tensor:
        """Blended per-vertex transforms sum_i w_i B_i, (V, 4, 4)."""
        return torch.einsum("vj,jab->vab", self.weights, B)

    def deform(self, B: torch.Tensor) -> torch.Tensor:
        A = self.vertex_transforms(B)
        return (A[:, :3, :3] @ self.vertices[:, :, None])[..., 0] + A[:, :3, 3]

    def inverse_vertex_transforms(self, B: torch.Tensor):
        """Inverse of the blended 3x3 block and the blended translation per vertex."""
        A = self.vertex_transforms(B)
        M = A[:, :3, :3]
        det = torch.linalg.det(M.detach())
        if torch.any(det.abs() < 1e-12):
            bad = int(torch.nonzero(det.abs() < 1e-12)[0])
            raise SingularSkinningError(f"blended skinning matrix singular at vertex {bad}")
        return torch.linalg.inv(M), A[:, :3, 3]

    def canonical_tree(self) -> cKDTree:
        if self._canon_tree is None:
            self._canon_tree = cKDTree(self.vertices.numpy())
        return self._canon_tree

    def canonical_bounds(self, padding: float = 0.1) -> Aabb:
        v = self.vertices.numpy()
        lo, hi = v.min(0) - padding, v.max(0) + padding
        c, half = (lo + hi) / 2, (hi - lo).max() / 2
        return Aabb(c - half, c + half)

    def outside_far(self, points: np.ndarray, distance: float = 0.05) -> np.ndarray:
        """Points outside the canonical surface and farther than ``distance`` from it."""
        d, idx = self.canonical_tree().query(points)
        n = self.normals.numpy()[idx]
        v = self.vertices.numpy()[idx]
        outward = ((points - v) * n).sum(-1) > 0
        return outward & (d > distance)


def inverse_lbs_torch(x: torch.Tensor, Minv: torch.Tensor, b: torch.Tensor, idx) -> torch.Tensor:
    """Canonical points for posed points ``x`` given nearest-vertex indices."""
    return (Minv[idx] @ (x - b[idx])[..., None])[..., 0]


class NearestVertex:
    """Exact nearest posed vertex lookup (KD-tree)."""

    def __init__(self, vertices: np.ndarray):
        self.tree = cKDTree(np.asarray(vertices, dtype=np.float64))

    def query(self, points: np.ndarray, upper_bound: float = np.inf, workers: int = 1):
        d, idx = self.tree.query(points, distance_upper_bound=upper_bound, workers=workers)
        far = ~np.isfinite(d)
        idx = np.where(far, 0, idx)
        return d, idx, far


# ---------------------------------------------------------------------------
# value-level operations


def shape_blend(template: SkeletonTemplate, beta) -> tuple[np.ndarray, np.ndarray]:
    beta = np.asarray(beta, dtype=np.float64)
    verts = template.template_vertices + template.shape_dirs @ beta
    joints = template.rest_joints + template.joint_shape_dirs @ beta
    return verts, joints


def _theta_trans(pose: PoseParams, dtype=torch.float64):
    return torch.as_tensor(pose.theta, dtype=dtype), torch.as_tensor(pose.trans, dtype=dtype)


def forward_kinematics(template: SkeletonTemplate, pose: PoseParams) -> BoneTransforms:
    body = BodyModel(template, pose.beta)
    with torch.no_grad():
        B = body.bone_transforms(*_theta_trans(pose))
    return BoneTransforms(B.numpy())


def deform_vertices(template: SkeletonTemplate, pose: PoseParams) -> np.ndarray:
    body = BodyModel(template, pose.beta)
    with torch.no_grad():
        return body.deform(body.bone_transforms(*_theta_trans(pose))).numpy()


def joints3d(template: SkeletonTemplate, pose: PoseParams) -> np.ndarray:
    body = BodyModel(template, pose.beta)
    with torch.no_grad():
        return body.joints(*_theta_trans(pose)).numpy()


def inverse_lbs(x, pose: PoseParams, posed_vertices: np.ndarray, template: SkeletonTemplate) -> np.ndarray:
    """Canonical point for posed point ``x`` via its nearest posed vertex's skinning."""
    x = np.asarray(x, dtype=np.float64)
    pts = x.reshape(-1, 3)
    d2 = ((pts[:, None, :] - posed_vertices[None]) ** 2).sum(-1)
    idx = d2.argmin(1)
    body = BodyModel(template, pose.beta)
    with torch.no_grad():
        Minv, b = body.inverse_vertex_transforms(body.bone_transforms(*_theta_trans(pose)))
        out = inverse_lbs_torch(torch.as_tensor(pts), Minv, b, torch.as_tensor(idx))
    return out.numpy().reshape(x.shape)


def instance_bbox(posed_vertices, padding: float = 0.0) -> Aabb:
    v = np.asarray(posed_vertices, dtype=np.float64).reshape(-1, 3)
    return Aabb(v.min(0) - padding, v.max(0) + padding)


@dataclass
class FitResult:
    pose: PoseParams
    rms: float
    converged: bool
    losses: list[float] = field(default_factory=list)


def fit_to_joints(template: SkeletonTemplate, target_joints, init: PoseParams | None = None,
                  steps: int = 2000, lr: float = 0.02, theta_weight: float = 1e-3,
                  fit_beta: bool = True, patience: int = 50, tol: float = 1e-12) -> FitResult:
    """Register the body to 3D joints with Adam.

    Minimizes ``sum ||J(pose) - target||^2 + theta_weight * ||theta||^2``.
    A run that fails to improve for ``patience`` consecutive steps before
    reaching ``tol`` is flagged as not converged; the best iterate is returned.
    """
    init = PoseParams() if init is None else init
    target = torch.as_tensor(np.asarray(target_joints, dtype=np.float64))
    if not torch.all(torch.isfinite(target)):
        raise ValueError("target joints must be finite")
    J0 = joints3d(template, init)
    rms0 = float(np.sqrt(((J0 - target.numpy()) ** 2).sum(-1).mean()))
    if rms0 < 1e-9:
        return FitResult(init.copy(), rms0, True, [])

    base = BodyModel(template, np.zeros(N_BETAS))
    S_j = torch.as_tensor(template.joint_shape_dirs)
    theta = torch.tensor(init.theta, requires_grad=True)
    trans = torch.tensor(init.trans, requires_grad=True)
    beta = torch.tensor(init.beta, requires_grad=fit_beta)
    params = [theta, trans] + ([beta] if fit_beta else [])
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=lr * 1e-3)

    def joints_of(th, tr, be):
        base.joints_rest = torch.as_tensor(template.rest_joints) + S_j @ be
        return base.joints(th, tr)

    best = (np.inf, None)
    losses, stall, converged = [], 0, False
    for _ in range(steps):
        opt.zero_grad()
        data = ((joints_of(theta, trans, beta) - target) ** 2).sum()
        loss = data + theta_weight * (theta ** 2).sum()
        loss.backward()
        value = loss.item()
        losses.append(value)
        if value < best[0] - 1e-15:
            best = (value, (theta.detach().clone(), trans.detach().clone(), beta.detach().clone()))
            stall = 0
        else:
            stall += 1
        if data.item() < tol:
            converged = True
            break
        if stall >= patience:
            break
        opt.step()
        sched.step()
    else:
        converged = True
    th, tr, be = best[1]
    with torch.no_grad():
        rms = float(torch.sqrt(((joints_of(th, tr, be) - target) ** 2).sum(-1).mean()))
    if not converged:
        log.warning("fit_to_joints stalled for %d steps (rms %.2e m)", patience, rms)
    return FitResult(PoseParams(be.numpy(), th.numpy(), tr.numpy()), rms, converged, losses)
