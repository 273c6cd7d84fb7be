"""Cameras, rays and axis-aligned boxes.

Conventions: right-handed world; camera frame x right, y down, z forward
(OpenCV). Pixel (i, j) -- column i, row j -- has its center at
(i + 0.5, j + 0.5). ``world_to_camera`` maps ``X_cam = R @ X_world + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class NotProjectableError(ValueError):
    """Point lies on or behind the camera plane."""


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must have positive focal entries")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "CameraModel":
        """Same camera at a different image resolution."""
        K = self.intrinsics.copy()
        K[:2] *= factor
        w, h = self.resolution
        return CameraModel(K, self.rotation, self.translation, (round(w * factor), round(h * factor)))

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.reshape(-1).tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            np.array(d["intrinsics"], dtype=np.float64).reshape(3, 3),
            np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(d["translation"], dtype=np.float64),
            (d["width"], d["height"]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = 1e4

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    def intersection(self, other: "Aabb") -> "Aabb | None":
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        if np.any(lo >= hi):
            return None
        return Aabb(lo, hi)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)


def project(camera: CameraModel, point) -> np.ndarray:
    """Perspective projection of a world point to pixel coordinates."""
    pc = camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation
    if pc[2] <= 0:
        raise NotProjectableError(f"point {point} has non-positive depth {pc[2]}")
    uvw = camera.intrinsics @ (pc / pc[2])
    return uvw[:2]


def project_points(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project`; rows with non-positive depth become NaN."""
    pc = np.asarray(points) @ camera.rotation.T + camera.translation
    z = pc[..., 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (pc[..., :2] / z) * np.diag(camera.intrinsics)[:2] + camera.intrinsics[:2, 2]
    uv[(z[..., 0] <= 0)] = np.nan
    return uv


def project_torch(camera: CameraModel, points: torch.Tensor) -> torch.Tensor:
    R = torch.as_tensor(camera.rotation, dtype=points.dtype)
    t = torch.as_tensor(camera.translation, dtype=points.dtype)
    K = torch.as_tensor(camera.intrinsics, dtype=points.dtype)
    pc = points @ R.T + t
    xy = pc[..., :2] / pc[..., 2:3]
    return xy @ K[:2, :2].T + K[:2, 2]


def pixel_ray(camera: CameraModel, pixel) -> Ray:
    """Ray from the camera center through continuous pixel coordinate ``pixel``."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.resolution}")
    o, d = pixel_rays(camera, np.array([[u, v]]))
    return Ray(o[0], d[0])


def pixel_rays(camera: CameraModel, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for an (N, 2) array of continuous pixel coords."""
    pixels = np.asarray(pixels, dtype=np.float64)
    Kinv = np.linalg.inv(camera.intrinsics)
    hom = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d_cam = hom @ Kinv.T
    d = d_cam @ camera.rotation  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def pixel_centers(camera: CameraModel) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates in row-major order."""
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1)


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Slab-method entry/exit depths clipped to ``[near, far]``; ``None`` on miss."""
    t0, t1 = ray_aabb_batch(ray.origin[None], ray.direction[None], box.min, box.max,
                            ray.near, ray.far)
    if not t0[0] < t1[0]:
        return None
    return float(t0[0]), float(t1[0])


def ray_aabb_batch(origins, dirs, lo, hi, near=0.0, far=1e4):
    """Vectorized slab test. Returns (t_enter, t_exit); a miss has t_enter >= t_exit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    ta = np.where(par, np.where(inside, -np.inf, np.inf), ta)
    tb = np.where(par, np.inf, tb)
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    return np.maximum(tmin, near), np.minimum(tmax, far)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    ``up`` is the world up direction; image y points opposite to it.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def save_cameras(path, cameras: list[CameraModel]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[CameraModel]:
    return [CameraModel.from_dict(d) for d in json.loads(Path(path).read_text())]
