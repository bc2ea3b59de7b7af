"""Detector description, Ewald-sphere mapping and rotation sampling.

Quaternions are stored as ``(w, x, y, z)`` and multiplied with the Hamilton
convention, so ``quat_multiply(b, a)`` applies ``a`` first and then ``b``.
"""

from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from spi.errors import ConfigurationError, FormatError

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


class MaskClass(enum.IntEnum):
    USE_ALL = 0
    MERGE_ONLY = 1
    IGNORE = 2


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for one quaternion (4,) or a stack (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def canonical_sign(q) -> np.ndarray:
    """Flip each quaternion so its first non-negligible component is positive."""
    q = np.array(q, dtype=np.float64, ndmin=2)
    lead = np.argmax(np.abs(q) > 1e-9, axis=1)
    sign = np.sign(q[np.arange(len(q)), lead])
    sign[sign == 0] = 1.0
    return q * sign[:, None]


def rotation_angle_between(a, b) -> np.ndarray:
    """Angle of the relative rotation between quaternions ``a`` and ``b``."""
    dot = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def rotate_q(q, rotation) -> np.ndarray:
    """Rotate 3-vector(s) ``q`` by the unit quaternion ``rotation``."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(rotation) - 1.0) > 1e-9:
        raise ValueError("rotation quaternion must have unit norm")
    return np.asarray(q, dtype=np.float64) @ quat_to_matrix(rotation).T


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotations as unit quaternions (normalized Gaussian 4-vectors)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return canonical_sign(q) if n else q


# ---------------------------------------------------------------------------
# rotation sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RotationSet:
    quaternions: np.ndarray
    weights: np.ndarray
    num_div: int = 0

    def __post_init__(self):
        q = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(q) != len(w):
            raise ValueError("one weight per quaternion required")
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
            raise ValueError("quaternions must be unit norm")
        if np.any(w <= 0):
            raise ValueError("rotation weights must be positive")
        w = w / w.sum()
        q.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "quaternions", q)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.quaternions)

    def matrices(self) -> np.ndarray:
        return quat_to_matrix(self.quaternions)

    @classmethod
    def from_quaternions(cls, quats) -> "RotationSet":
        """Explicit list with equal weights."""
        quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        return cls(quats, np.ones(len(quats)), 0)

    @classmethod
    def read(cls, path) -> "RotationSet":
        """Read a text file of ``w x y z [weight]`` rows."""
        data = np.loadtxt(path, ndmin=2, comments="#")
        if data.shape[1] not in (4, 5):
            raise FormatError(f"{path}: expected 4 or 5 columns, got {data.shape[1]}")
        weights = data[:, 4] if data.shape[1] == 5 else np.ones(len(data))
        return cls(data[:, :4], weights, 0)

    def write(self, path) -> None:
        np.savetxt(path, np.column_stack([self.quaternions, self.weights]),
                   fmt="%.17g", header=f"w x y z weight  num_div={self.num_div}")


def _600cell_vertices() -> np.ndarray:
    verts = []
    for i in range(4):
        for s in (1.0, -1.0):
            v = np.zeros(4)
            v[i] = s
            verts.append(v)
    for signs in itertools.product((0.5, -0.5), repeat=4):
        verts.append(np.array(signs))
    base = (GOLDEN / 2.0, 0.5, 1.0 / (2.0 * GOLDEN), 0.0)
    even_perms = [p for p in itertools.permutations(range(4))
                  if _perm_parity(p) == 0]
    for p in even_perms:
        for signs in itertools.product((1.0, -1.0), repeat=3):
            v = np.zeros(4)
            vals = [base[0] * signs[0], base[1] * signs[1], base[2] * signs[2], 0.0]
            for src, dst in enumerate(p):
                v[dst] = vals[src]
            verts.append(v)
    return np.array(verts)


def _perm_parity(p) -> int:
    p = list(p)
    parity = 0
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            if p[i] > p[j]:
                parity ^= 1
    return parity


def _600cell_cells(verts: np.ndarray) -> np.ndarray:
    """Vertex indices of the 600 tetrahedral cells."""
    dots = verts @ verts.T
    adjacent = np.abs(dots - GOLDEN / 2.0) < 1e-9
    nbrs = [set(np.flatnonzero(row)) for row in adjacent]
    cells = set()
    for a in range(len(verts)):
        for b in nbrs[a]:
            if b <= a:
                continue
            common = nbrs[a] & nbrs[b]
            for c in common:
                if c <= b:
                    continue
                for d in common & nbrs[c]:
                    if d > c:
                        cells.add((a, b, c, d))
    return np.array(sorted(cells))


def _simplex_lattice(n: int) -> np.ndarray:
    """Barycentric coordinates (i, j, k, l)/n with i+j+k+l = n."""
    pts = [(i, j, k, n - i - j - k)
           for i in range(n + 1) for j in range(n + 1 - i) for k in range(n + 1 - i - j)]
    return np.array(pts, dtype=np.float64) / n


def sample_rotations(num_div: int) -> RotationSet:
    """Quasi-uniform rotations from the refined 600-cell.

    Each tetrahedral cell of the 600-cell is subdivided into a barycentric
    lattice with ``num_div`` divisions per edge. Lattice points are projected
    onto the unit 3-sphere, antipodal duplicates dropped, and each sample is
    weighted by the Jacobian of the radial projection (``1/|p|**4``). The set
    contains ``10 * (5 * num_div**3 + num_div)`` rotations.
    """
    if num_div < 1:
        raise ValueError("num_div must be >= 1")
    verts = _600cell_vertices()
    cells = _600cell_cells(verts)
    bary = _simplex_lattice(num_div)
    pts = np.einsum("pk,ckd->cpd", bary, verts[cells]).reshape(-1, 4)
    keys = np.round(pts * (4 * num_div), 6)
    _, first = np.unique(keys, axis=0, return_index=True)
    pts = pts[np.sort(first)]
    norm = np.linalg.norm(pts, axis=1)
    quats = pts / norm[:, None]
    weights = norm ** -4
    quats = canonical_sign(quats)
    # each rotation appears twice (q and -q); keep one copy
    keys = np.round(quats * 1e8).astype(np.int64)
    _, keep = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(keep)
    return RotationSet(quats[keep], weights[keep], num_div)


def nearest_rotation_angles(samples, queries) -> np.ndarray:
    """Angle from each query rotation to its nearest sample rotation."""
    samples = np.asarray(samples)
    both = np.concatenate([samples, -samples])
    tree = cKDTree(both)
    chord, _ = tree.query(np.asarray(queries))
    # chord between unit quaternions: |p - q| = 2 sin(theta_q / 2)
    alpha = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    return 2.0 * alpha


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentGeometry:
    """Flat-detector scattering geometry.

    Lengths follow the Dragonfly-style config: ``detector_distance`` and
    ``pixel_size`` in mm, ``wavelength`` in Angstrom. ``ewald_radius_voxels``
    fixes the reciprocal voxel size at ``1 / (wavelength * ewald_radius_voxels)``.
    """

    detector_distance: float
    wavelength: float
    pixel_size: float
    detector_shape: tuple[int, int]
    ewald_radius_voxels: float
    central_stop_radius: float = 0.0
    polarization: str = "x"
    center: tuple[float, float] | None = None

    def __post_init__(self):
        shape = tuple(int(n) for n in self.detector_shape)
        object.__setattr__(self, "detector_shape", shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ConfigurationError(f"bad detector shape {self.detector_shape}")
        for name in ("detector_distance", "wavelength", "pixel_size", "ewald_radius_voxels"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.central_stop_radius < 0:
            raise ConfigurationError("central_stop_radius must be non-negative")
        if self.polarization not in ("x", "y", "none"):
            raise ConfigurationError(f"unknown polarization {self.polarization!r}")

    @property
    def voxel_size(self) -> float:
        """Reciprocal voxel size in inverse Angstrom."""
        return 1.0 / (self.wavelength * self.ewald_radius_voxels)

    def pixel_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel positions relative to the beam axis, in pixel units."""
        nx, ny = self.detector_shape
        cx, cy = self.center if self.center is not None else ((nx - 1) / 2.0, (ny - 1) / 2.0)
        x, y = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
        return x, y

    def resolution_at(self, x_pix: float, y_pix: float) -> float:
        """Full-period resolution ``d = 1/q`` in nm at a pixel offset."""
        dist = self.detector_distance / self.pixel_size
        norm = np.sqrt(x_pix ** 2 + y_pix ** 2 + dist ** 2)
        qvec = np.array([x_pix / norm, y_pix / norm, dist / norm - 1.0]) / self.wavelength
        return 0.1 / np.linalg.norm(qvec)


@dataclass(frozen=True)
class DetectorModel:
    pixel_q: np.ndarray
    pixel_weight: np.ndarray
    mask_class: np.ndarray
    detector_shape: tuple[int, ...] = ()
    voxel_size: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.pixel_q, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.pixel_weight, dtype=np.float64).reshape(-1)
        m = np.asarray(self.mask_class, dtype=np.uint8).reshape(-1)
        if not (len(q) == len(w) == len(m)):
            raise ValueError("pixel arrays must have equal length")
        if np.any(m > MaskClass.IGNORE):
            raise ValueError("mask classes must be 0, 1 or 2")
        if np.any(w[m != MaskClass.IGNORE] <= 0):
            raise ValueError("pixel weights must be positive on used pixels")
        shape = tuple(self.detector_shape) or (len(q),)
        if int(np.prod(shape)) != len(q):
            raise ValueError("detector_shape does not match the pixel count")
        for arr in (q, w, m):
            arr.flags.writeable = False
        object.__setattr__(self, "pixel_q", q)
        object.__setattr__(self, "pixel_weight", w)
        object.__setattr__(self, "mask_class", m)
        object.__setattr__(self, "detector_shape", shape)

    @property
    def num_pixels(self) -> int:
        return len(self.mask_class)

    @property
    def used(self) -> np.ndarray:
        """Pixels that take part in merging (USE_ALL or MERGE_ONLY)."""
        return self.mask_class != MaskClass.IGNORE

    @property
    def orient(self) -> np.ndarray:
        """Pixels used for orientation and scale estimation."""
        return self.mask_class == MaskClass.USE_ALL

    @property
    def q_max(self) -> float:
        used = self.used
        if not used.any():
            return 0.0
        return float(np.linalg.norm(self.pixel_q[used], axis=1).max())

    def min_grid_size(self) -> int:
        """Smallest odd edge length that holds every used pixel with a one-voxel margin."""
        return 2 * (int(np.ceil(self.q_max)) + 1) + 1


def build_detector(geom: ExperimentGeometry, mask=None, q_max: float | None = None,
                   grid_size: int | None = None) -> DetectorModel:
    """Map detector pixels onto the Ewald sphere.

    ``mask`` is a per-pixel class map shaped like ``geom.detector_shape``.
    Pixels beyond ``q_max`` voxels (the edge of the reconstructed sphere) are
    ignored; pixels within ``central_stop_radius`` are demoted to MERGE_ONLY.
    If ``grid_size`` is given, every used pixel must fit inside it with room
    for trilinear interpolation.
    """
    shape = geom.detector_shape
    if mask is None:
        mask = np.zeros(shape, dtype=np.uint8)
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ConfigurationError(f"mask shape {mask.shape} does not match detector {shape}")
    if np.any((mask < 0) | (mask > MaskClass.IGNORE)):
        raise ConfigurationError("mask values must be 0, 1 or 2")
    mask = mask.astype(np.uint8).copy()

    x, y = geom.pixel_offsets()
    dist = geom.detector_distance / geom.pixel_size
    norm = np.sqrt(x * x + y * y + dist * dist)
    rad = geom.ewald_radius_voxels
    q = np.stack([rad * x / norm, rad * y / norm, rad * (dist / norm - 1.0)], axis=-1)

    solid_angle = (dist / norm) ** 3
    if geom.polarization == "x":
        pol = 1.0 - (x / norm) ** 2
    elif geom.polarization == "y":
        pol = 1.0 - (y / norm) ** 2
    else:
        pol = np.ones_like(x)
    weight = solid_angle * pol

    rpix = np.hypot(x, y)
    stop = (rpix < geom.central_stop_radius) & (mask == MaskClass.USE_ALL)
    mask[stop] = MaskClass.MERGE_ONLY
    qnorm = np.linalg.norm(q, axis=-1)
    if q_max is not None:
        mask[qnorm > q_max] = MaskClass.IGNORE

    det = DetectorModel(q.reshape(-1, 3), weight.ravel(), mask.ravel(), shape, geom.voxel_size)
    if grid_size is not None:
        limit = (grid_size - 1) / 2.0 - 1.0
        if det.q_max > limit:
            raise ConfigurationError(
                f"pixels reach |q| = {det.q_max:.2f} voxels but a grid of {grid_size} "
                f"only holds {limit:.2f}")
    return det


# Detector file layout (little-endian):
#   8s magic b"SPIDET\0\0" | u4 version | u4 num_pixels | u4 ndim | u4[ndim] shape
#   f8 voxel_size | num_pixels records of (f8 qx, f8 qy, f8 qz, f8 weight, u1 class)
_DET_MAGIC = b"SPIDET\0\0"
_DET_RECORD = np.dtype([("q", "<f8", (3,)), ("weight", "<f8"), ("mask", "u1")])


def write_detector(det: DetectorModel, path) -> None:
    rec = np.empty(det.num_pixels, dtype=_DET_RECORD)
    rec["q"] = det.pixel_q
    rec["weight"] = det.pixel_weight
    rec["mask"] = det.mask_class
    shape = det.detector_shape
    with open(path, "wb") as fh:
        fh.write(_DET_MAGIC)
        fh.write(struct.pack("<III", 1, det.num_pixels, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<d", det.voxel_size))
        fh.write(rec.tobytes())


def read_detector(path) -> DetectorModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _DET_MAGIC:
        raise FormatError(f"{path}: not a detector file")
    version, npix, ndim = struct.unpack_from("<III", raw, 8)
    if version != 1:
        raise FormatError(f"{path}: unsupported detector version {version}")
    off = 20
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (voxel_size,) = struct.unpack_from("<d", raw, off)
    off += 8
    if len(raw) - off != npix * _DET_RECORD.itemsize:
        raise FormatError(f"{path}: truncated or oversized pixel table")
    rec = np.frombuffer(raw, dtype=_DET_RECORD, count=npix, offset=off)
    return DetectorModel(rec["q"].copy(), rec["weight"].copy(), rec["mask"].copy(),
                         tuple(shape), voxel_size)


def read_mask(path, shape) -> np.ndarray:
    """One byte per pixel, values {0: USE_ALL, 1: MERGE_ONLY, 2: IGNORE}."""
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: {data.size} bytes, expected {int(np.prod(shape))}")
    if np.any(data > MaskClass.IGNORE):
        raise FormatError(f"{path}: mask values must be 0, 1 or 2")
    return data.reshape(shape)


def write_mask(mask, path) -> None:
    np.asarray(mask, dtype=np.uint8).tofile(path)
