"""Compiled interpolation kernels.

``mode`` 0 is trilinear, 1 is nearest neighbour. Points are in voxels from the
grid origin (index ``n // 2``). Corners outside the grid contribute nothing,
so sampling and scattering are exact adjoints under zero padding.
"""

import numpy as np
from numba import njit

TRILINEAR = 0
NEAREST = 1


@njit(cache=True, inline="always")
def _sample_one(vol, fx, fy, fz, mode):
    nx, ny, nz = vol.shape
    if mode == NEAREST:
        ix = int(np.floor(fx + 0.5))
        iy = int(np.floor(fy + 0.5))
        iz = int(np.floor(fz + 0.5))
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
            return vol[0, 0, 0] * 0.0
        return vol[ix, iy, iz]
    x0 = int(np.floor(fx))
    y0 = int(np.floor(fy))
    z0 = int(np.floor(fz))
    tx = fx - x0
    ty = fy - y0
    tz = fz - z0
    acc = vol[0, 0, 0] * 0.0
    for a in range(2):
        xi = x0 + a
        if xi < 0 or xi >= nx:
            continue
        wx = tx if a == 1 else 1.0 - tx
        for b in range(2):
            yi = y0 + b
            if yi < 0 or yi >= ny:
                continue
            wy = ty if b == 1 else 1.0 - ty
            for c in range(2):
                zi = z0 + c
                if zi < 0 or zi >= nz:
                    continue
                wz = tz if c == 1 else 1.0 - tz
                acc += wx * wy * wz * vol[xi, yi, zi]
    return acc


@njit(cache=True, inline="always")
def _scatter_one(acc1, acc2, fx, fy, fz, v1, v2, mode):
    nx, ny, nz = acc1.shape
    if mode == NEAREST:
        ix = int(np.floor(fx + 0.5))
        iy = int(np.floor(fy + 0.5))
        iz = int(np.floor(fz + 0.5))
        if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
            acc1[ix, iy, iz] += v1
            acc2[ix, iy, iz] += v2
        return
    x0 = int(np.floor(fx))
    y0 = int(np.floor(fy))
    z0 = int(np.floor(fz))
    tx = fx - x0
    ty = fy - y0
    tz = fz - z0
    for a in range(2):
        xi = x0 + a
        if xi < 0 or xi >= nx:
            continue
        wx = tx if a == 1 else 1.0 - tx
        for b in range(2):
            yi = y0 + b
            if yi < 0 or yi >= ny:
                continue
            wy = ty if b == 1 else 1.0 - ty
            for c in range(2):
                zi = z0 + c
                if zi < 0 or zi >= nz:
                    continue
                wz = tz if c == 1 else 1.0 - tz
                t = wx * wy * wz
                acc1[xi, yi, zi] += t * v1
                acc2[xi, yi, zi] += t * v2


@njit(cache=True)
def sample_points(vol, pts, mode, out):
    cx = vol.shape[0] // 2
    cy = vol.shape[1] // 2
    cz = vol.shape[2] // 2
    for i in range(pts.shape[0]):
        out[i] = _sample_one(vol, pts[i, 0] + cx, pts[i, 1] + cy, pts[i, 2] + cz, mode)


@njit(cache=True)
def scatter_points(acc1, acc2, pts, v1, v2, mode):
    cx = acc1.shape[0] // 2
    cy = acc1.shape[1] // 2
    cz = acc1.shape[2] // 2
    for i in range(pts.shape[0]):
        _scatter_one(acc1, acc2, pts[i, 0] + cx, pts[i, 1] + cy, pts[i, 2] + cz, v1[i], v2[i], mode)


@njit(cache=True)
def expand_rotations(vol, q, mats, weight, mode, out):
    """``out[r, p] = weight[p] * vol(mats[r] @ q[p])``."""
    cx = vol.shape[0] // 2
    cy = vol.shape[1] // 2
    cz = vol.shape[2] // 2
    for r in range(mats.shape[0]):
        m = mats[r]
        for p in range(q.shape[0]):
            x = m[0, 0] * q[p, 0] + m[0, 1] * q[p, 1] + m[0, 2] * q[p, 2]
            y = m[1, 0] * q[p, 0] + m[1, 1] * q[p, 1] + m[1, 2] * q[p, 2]
            z = m[2, 0] * q[p, 0] + m[2, 1] * q[p, 1] + m[2, 2] * q[p, 2]
            out[r, p] = weight[p] * _sample_one(vol, x + cx, y + cy, z + cz, mode)


@njit(cache=True)
def merge_rotations(num, den, q, mats, A, B, weight, mode):
    """Scatter ``A[r, p]`` into ``num`` and ``B[r] * weight[p]`` into ``den``."""
    cx = num.shape[0] // 2
    cy = num.shape[1] // 2
    cz = num.shape[2] // 2
    for r in range(mats.shape[0]):
        m = mats[r]
        for p in range(q.shape[0]):
            x = m[0, 0] * q[p, 0] + m[0, 1] * q[p, 1] + m[0, 2] * q[p, 2]
            y = m[1, 0] * q[p, 0] + m[1, 1] * q[p, 1] + m[1, 2] * q[p, 2]
            z = m[2, 0] * q[p, 0] + m[2, 1] * q[p, 1] + m[2, 2] * q[p, 2]
            _scatter_one(num, den, x + cx, y + cy, z + cz, A[r, p], B[r] * weight[p], mode)
