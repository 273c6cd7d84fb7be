"""Numba kernels for trilinear lookup in a stack of dense/hashed grids.

All levels live in one (total, F) array; ``offsets[l]`` is the first row of
level ``l``. Hashed levels use the XOR-of-primes spatial hash modulo a power
of two table size. With ``smooth`` set, the per-axis weights go through the
smoothstep ``3t^2 - 2t^3`` so the lookup is continuously differentiable in
position; otherwise it is plain trilinear interpolation.
"""
import numba
import numpy as np

_P1 = np.int64(2654435761)
_P2 = np.int64(805459861)


@numba.njit(cache=True, inline="always")
def _corner_index(ix, iy, iz, res, dense, size):
    if dense:
        n = res + 1
        return ix + n * (iy + n * iz)
    return (ix ^ (iy * _P1) ^ (iz * _P2)) & (size - 1)


@numba.njit(cache=True, inline="always")
def _ramp(t, smooth):
    if smooth:
        return t * t * (3.0 - 2.0 * t)
    return t


@numba.njit(cache=True, inline="always")
def _dramp(t, smooth):
    if smooth:
        return 6.0 * t * (1.0 - t)
    return 1.0


@numba.njit(cache=True)
def grid_forward(u, table, offsets, res, dense, sizes, smooth, out):
    n_pts = u.shape[0]
    n_feat = table.shape[1]
    for p in range(n_pts):
        for lv in range(res.shape[0]):
            r = res[lv]
            base = offsets[lv]
            fx = u[p, 0] * r
            fy = u[p, 1] * r
            fz = u[p, 2] * r
            ix = min(max(int(np.floor(fx)), 0), r - 1)
            iy = min(max(int(np.floor(fy)), 0), r - 1)
            iz = min(max(int(np.floor(fz)), 0), r - 1)
            tx = _ramp(fx - ix, smooth)
            ty = _ramp(fy - iy, smooth)
            tz = _ramp(fz - iz, smooth)
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                w = (tx if cx else 1 - tx) * (ty if cy else 1 - ty) * (tz if cz else 1 - tz)
                row = base + _corner_index(ix + cx, iy + cy, iz + cz, r, dense[lv], sizes[lv])
                for f in range(n_feat):
                    out[p, lv * n_feat + f] += w * table[row, f]


@numba.njit(cache=True)
def grid_backward(u, table, offsets, res, dense, sizes, smooth, grad_out, grad_table, grad_u,
                  want_table, want_u):
    n_pts = u.shape[0]
    n_feat = table.shape[1]
    for p in range(n_pts):
        for lv in range(res.shape[0]):
            r = res[lv]
            base = offsets[lv]
            fx = u[p, 0] * r
            fy = u[p, 1] * r
            fz = u[p, 2] * r
            ix = min(max(int(np.floor(fx)), 0), r - 1)
            iy = min(max(int(np.floor(fy)), 0), r - 1)
            iz = min(max(int(np.floor(fz)), 0), r - 1)
            gx = fx - ix
            gy = fy - iy
            gz = fz - iz
            tx = _ramp(gx, smooth)
            ty = _ramp(gy, smooth)
            tz = _ramp(gz, smooth)
            dx = r * _dramp(gx, smooth)
            dy = r * _dramp(gy, smooth)
            dz = r * _dramp(gz, smooth)
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                wx = tx if cx else 1 - tx
                wy = ty if cy else 1 - ty
                wz = tz if cz else 1 - tz
                row = base + _corner_index(ix + cx, iy + cy, iz + cz, r, dense[lv], sizes[lv])
                if want_table:
                    w = wx * wy * wz
                    for f in range(n_feat):
                        grad_table[row, f] += w * grad_out[p, lv * n_feat + f]
                if want_u:
                    sx = dx if cx else -dx
                    sy = dy if cy else -dy
                    sz = dz if cz else -dz
                    g = 0.0
                    for f in range(n_feat):
                        g += grad_out[p, lv * n_feat + f] * table[row, f]
                    grad_u[p, 0] += g * sx * wy * wz
                    grad_u[p, 1] += g * wx * sy * wz
                    grad_u[p, 2] += g * wx * wy * sz
