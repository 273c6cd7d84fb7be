"""Pixel pools and ray batches drawn from a scene's images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import pixel_centers, pixel_rays, ray_aabb_batch
from .scene import Scene


@dataclass
class RayBatch:
    frame: int
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    colors: np.ndarray  # (R, 3) target colors
    masks: np.ndarray  # (R,) union foreground
    pixel_ids: np.ndarray  # (R,) flat index view * H * W + pixel

    def __len__(self) -> int:
        return len(self.origins)


class RayPool:
    """Candidate pixels of one frame over a subset of views.

    ``select`` is a (V, H, W) boolean array of pixels to draw from; by default
    every pixel is a candidate.
    """

    def __init__(self, scene: Scene, frame: int, views=None, select: np.ndarray | None = None):
        self.scene = scene
        self.frame = frame
        self.views = list(range(scene.n_views)) if views is None else list(views)
        o, d, ids = [], [], []
        H, W = scene.images.shape[2:4]
        self.hw = H * W
        for v in self.views:
            cam = scene.cameras[v]
            oo, dd = pixel_rays(cam, pixel_centers(cam))
            keep = np.ones(H * W, dtype=bool) if select is None else select[v].reshape(-1)
            o.append(oo[keep])
            d.append(dd[keep])
            ids.append(v * H * W + np.nonzero(keep)[0])
        self.origins = np.concatenate(o) if o else np.zeros((0, 3))
        self.dirs = np.concatenate(d) if d else np.zeros((0, 3))
        self.ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        img = scene.images[frame].reshape(-1, 3)
        msk = scene.masks[frame].reshape(-1)
        self.colors = img[self.ids]
        self.masks = msk[self.ids]

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index: np.ndarray) -> RayBatch:
        return RayBatch(self.frame, self.origins[index], self.dirs[index], self.colors[index],
                        self.masks[index], self.ids[index])

    def sample(self, rng: np.random.Generator, n: int) -> RayBatch:
        if len(self) == 0:
            raise ValueError("empty ray pool")
        return self.take(rng.choice(len(self), size=min(n, len(self)), replace=False))

    def all(self) -> RayBatch:
        return self.take(np.arange(len(self)))


def box_hit_select(scene: Scene, boxes, views=None, padding: float = 0.08) -> np.ndarray:
    """(V, H, W) pixels whose rays meet any padded box."""
    H, W = scene.images.shape[2:4]
    out = np.zeros((scene.n_views, H, W), dtype=bool)
    for v in range(scene.n_views) if views is None else views:
        cam = scene.cameras[v]
        o, d = pixel_rays(cam, pixel_centers(cam))
        hit = np.zeros(len(o), dtype=bool)
        for b in boxes:
            t0, t1 = ray_aabb_batch(o, d, b.min - padding, b.max + padding)
            hit |= t0 < t1
        out[v] = hit.reshape(H, W)
    return out


def dilated_mask_select(scene: Scene, frame: int, radius: int = 20) -> np.ndarray:
    """(V, H, W) union mask grown by ``radius`` pixels (disk structuring element)."""
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = xx * xx + yy * yy <= radius * radius
    return np.stack([ndimage.binary_dilation(m > 0.5, structure=disk) if radius > 0 else m > 0.5
                     for m in scene.masks[frame]])
