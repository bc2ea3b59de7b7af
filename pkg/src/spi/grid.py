"""Helpers for centered cubic grids shared by the simulation, EMC and metrics.

Grids are indexed ``vol[ix, iy, iz]`` with the origin at index ``M // 2`` along
every axis, so odd edge lengths put the origin exactly on the center voxel.
Reciprocal-space coordinates are expressed in voxel units throughout.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from spi import _kernels


def center_index(shape) -> np.ndarray:
    return np.asarray(shape) // 2


def centered_coords(shape) -> list[np.ndarray]:
    """Open (broadcastable) coordinate arrays relative to the grid origin."""
    shape = tuple(shape)
    axes = [np.arange(n) - n // 2 for n in shape]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def radius(shape) -> np.ndarray:
    x, y, z = centered_coords(shape)
    return np.sqrt(x * x + y * y + z * z)


def shell_index(shape) -> np.ndarray:
    """Unit-width spherical shell of every voxel, ``floor(|q|)``."""
    return np.floor(radius(shape)).astype(np.int64)


def radial_mean(vol: np.ndarray, shells: np.ndarray | None = None) -> np.ndarray:
    """Mean value in each unit shell, indexed by shell number."""
    if shells is None:
        shells = shell_index(vol.shape)
    flat = shells.ravel()
    counts = np.bincount(flat)
    sums = np.bincount(flat, weights=vol.ravel().real)
    if np.iscomplexobj(vol):
        sums = sums + 1j * np.bincount(flat, weights=vol.ravel().imag)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts


def radial_average(vol: np.ndarray, shells: np.ndarray | None = None) -> np.ndarray:
    """Replace every voxel by the mean of its shell."""
    if shells is None:
        shells = shell_index(vol.shape)
    return radial_mean(vol, shells)[shells]


def friedel_symmetrize(vol: np.ndarray) -> np.ndarray:
    """Average a volume with its inversion through the origin voxel."""
    if any(n % 2 == 0 for n in vol.shape):
        raise ValueError("Friedel symmetrization needs odd edge lengths")
    return 0.5 * (vol + vol[::-1, ::-1, ::-1])


def fft3(vol: np.ndarray) -> np.ndarray:
    """Unnormalized DFT with the origin at the grid center in both spaces."""
    return sfft.fftshift(sfft.fftn(sfft.ifftshift(vol), workers=1))


def ifft3(vol: np.ndarray) -> np.ndarray:
    return sfft.fftshift(sfft.ifftn(sfft.ifftshift(vol), workers=1))


def _mode(interpolation: str) -> int:
    if interpolation == "trilinear":
        return _kernels.TRILINEAR
    if interpolation == "nearest":
        return _kernels.NEAREST
    raise ValueError(f"unknown interpolation {interpolation!r}")


def _points(points) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))


def sample(vol: np.ndarray, points, interpolation: str = "trilinear") -> np.ndarray:
    """Sample ``vol`` at ``points`` (N, 3), given in voxels from the origin."""
    pts = _points(points)
    out = np.empty(len(pts), dtype=vol.dtype)
    _kernels.sample_points(np.ascontiguousarray(vol), pts, _mode(interpolation), out)
    return out


def scatter(points, values, shape, out: np.ndarray | None = None,
            interpolation: str = "trilinear") -> np.ndarray:
    """Accumulate ``values`` at ``points`` into a grid (``out`` is updated in place)."""
    pts = _points(points)
    if out is None:
        out = np.zeros(tuple(shape))
    if out.dtype != np.float64 or not out.flags.c_contiguous:
        raise ValueError("scatter target must be a C-contiguous float64 array")
    vals = np.ascontiguousarray(np.broadcast_to(np.asarray(values, dtype=np.float64), (len(pts),)))
    # second accumulator aliases the first and receives zeros
    _kernels.scatter_points(out, out, pts, vals, np.zeros(len(pts)), _mode(interpolation))
    return out


def trilinear_sample(vol, points):
    return sample(vol, points, "trilinear")


def nearest_sample(vol, points):
    return sample(vol, points, "nearest")


def trilinear_scatter(points, values, shape, out=None):
    return scatter(points, values, shape, out, "trilinear")


def nearest_scatter(points, values, shape, out=None):
    return scatter(points, values, shape, out, "nearest")
