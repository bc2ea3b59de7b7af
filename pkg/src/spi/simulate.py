"""Synthetic phantoms and sparse diffraction frames.

The phantom is an icosahedral double-walled shell; frames are Poisson draws
from Ewald-sphere slices of its 3D intensity plus an isotropic background.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from spi import grid, rng as rngmod
from spi.dataio import SparseFrame, ValueKind, VolumeGrid
from spi.geometry import DetectorModel, GOLDEN, quat_to_matrix, random_rotations

log = logging.getLogger(__name__)

# icosahedron inradius / circumradius
_ICO_IN_OVER_CIRC = GOLDEN ** 2 / np.sqrt(3.0) / np.sqrt(1.0 + GOLDEN ** 2)


def icosahedron_vertices() -> np.ndarray:
    """12 unit vertices, oriented so the coordinate axes are 2-fold axes."""
    v = []
    for a in (1.0, -1.0):
        for b in (GOLDEN, -GOLDEN):
            v += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(v)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def icosahedron_face_normals() -> np.ndarray:
    n = [s for s in np.array(np.meshgrid([1, -1], [1, -1], [1, -1])).T.reshape(-1, 3)]
    ig = 1.0 / GOLDEN
    for a in (1.0, -1.0):
        for b in (1.0, -1.0):
            n += [(0.0, a * ig, b * GOLDEN), (a * ig, b * GOLDEN, 0.0), (b * GOLDEN, 0.0, a * ig)]
    n = np.array(n, dtype=np.float64)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def icosahedron_volume(circumradius: float) -> float:
    edge = circumradius / np.sqrt(1.0 + GOLDEN ** 2) * 2.0
    return 5.0 / 12.0 * (3.0 + np.sqrt(5.0)) * edge ** 3


@dataclass(frozen=True)
class PhantomParams:
    """Icosahedral double shell, radii measured as icosahedral circumradii in voxels.

    From the outside in: an outer wall of thickness ``shell_thickness[0]``, a
    gap of width ``gap`` at ``gap_density``, an inner wall of thickness
    ``shell_thickness[1]`` and a core at ``core_density``. Without an inner
    wall the gap merges into the core. Optional spheres of radius
    ``bulge_radius`` sit on the 12 vertices.
    """

    outer_radius: float = 8.0
    shell_thickness: tuple[float, float] = (1.5, 1.5)
    gap: float = 1.5
    core_density: float = 0.6
    shell_density: float = 1.0
    gap_density: float = 0.4
    bulge_radius: float = 0.0


@dataclass
class Phantom:
    density: VolumeGrid
    params: PhantomParams

    @property
    def support(self) -> np.ndarray:
        return self.density.values > 0


def make_phantom(params: PhantomParams = PhantomParams(), grid_size: int = 65,
                 edge_margin: int = 2) -> Phantom:
    if grid_size % 2 == 0:
        raise ValueError("grid_size must be odd")
    t_out, t_in = params.shell_thickness
    if min(params.outer_radius, t_out, t_in, params.gap) < 0:
        raise ValueError("radii and thicknesses must be non-negative")
    if t_out + t_in + params.gap > params.outer_radius:
        raise ValueError("shells do not fit inside the outer radius")
    if params.outer_radius + params.bulge_radius > grid_size // 2 - edge_margin:
        raise ValueError("phantom does not fit inside the grid")

    x, y, z = grid.centered_coords((grid_size,) * 3)
    normals = icosahedron_face_normals()
    gauge = np.full((grid_size,) * 3, -np.inf)
    for n in normals:
        gauge = np.maximum(gauge, x * n[0] + y * n[1] + z * n[2])
    gauge /= _ICO_IN_OVER_CIRC

    R = params.outer_radius
    rho = np.zeros((grid_size,) * 3)
    rho[gauge <= R] = params.shell_density
    inner_edge = R - t_out
    if t_in > 0:
        rho[gauge <= inner_edge] = params.gap_density
        inner_edge -= params.gap
        rho[gauge <= inner_edge] = params.shell_density
        inner_edge -= t_in
    rho[gauge <= inner_edge] = params.core_density

    if params.bulge_radius > 0:
        for v in icosahedron_vertices() * R:
            d2 = (x - v[0]) ** 2 + (y - v[1]) ** 2 + (z - v[2]) ** 2
            rho[(d2 <= params.bulge_radius ** 2) & (rho == 0)] = params.shell_density
    return Phantom(VolumeGrid(rho, 1.0, ValueKind.NONNEGATIVE), params)


fourier_transform = grid.fft3


@dataclass
class GroundTruthIntensity:
    """``intensity = |F[density]|**2 + b(|q|)**2`` with ``b**2 = A exp(-q**2 / 2 sigma**2)``."""

    intensity: VolumeGrid
    background_amplitude: float = 0.0
    background_sigma: float = 1.0

    def background(self, q) -> np.ndarray:
        """Background intensity ``b(q)**2`` at radius ``q`` (voxels)."""
        q = np.asarray(q, dtype=np.float64)
        return self.background_amplitude * np.exp(-q * q / (2.0 * self.background_sigma ** 2))

    def particle(self) -> np.ndarray:
        r = grid.radius(self.intensity.values.shape)
        return self.intensity.values - self.background(r)


def particle_intensity(density: np.ndarray) -> np.ndarray:
    I = np.abs(fourier_transform(density)) ** 2
    return grid.friedel_symmetrize(I)


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def spherical_profile(intensity: np.ndarray, radii, num_directions: int = 2000) -> np.ndarray:
    """Mean of the trilinearly interpolated volume over spheres of the given radii."""
    dirs = _fibonacci_sphere(num_directions)
    radii = np.asarray(radii, dtype=np.float64)
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, 3)
    return grid.trilinear_sample(np.ascontiguousarray(intensity, dtype=np.float64), pts).reshape(
        len(radii), -1).mean(axis=1)


def orientation_averaged_photons(intensity: np.ndarray, det: DetectorModel) -> float:
    """Expected photons per frame at unit fluence, averaged over orientations."""
    r = np.linalg.norm(det.pixel_q[det.used], axis=1)
    if r.size == 0:
        return 0.0
    knots = np.linspace(0.0, r.max(), int(np.ceil(r.max() / 0.05)) + 2)
    vals = np.interp(r, knots, spherical_profile(intensity, knots))
    return float(np.sum(det.pixel_weight[det.used] * vals))


def make_truth(phantom: Phantom, det: DetectorModel | None = None,
               background_fraction: float = 0.0, background_sigma: float = 12.0,
               background_amplitude: float | None = None) -> GroundTruthIntensity:
    """Ground-truth intensity of a phantom plus isotropic background.

    With ``background_fraction`` the amplitude is chosen so that background
    makes up that fraction of the expected photons on ``det``.
    """
    particle = particle_intensity(phantom.density.values)
    r = grid.radius(particle.shape)
    profile = np.exp(-r * r / (2.0 * background_sigma ** 2))
    if background_amplitude is None:
        if background_fraction > 0:
            if det is None:
                raise ValueError("background_fraction needs a detector")
            p = orientation_averaged_photons(particle, det)
            b = orientation_averaged_photons(profile, det)
            background_amplitude = background_fraction / (1.0 - background_fraction) * p / b
        else:
            background_amplitude = 0.0
    total = particle + background_amplitude * profile
    return GroundTruthIntensity(VolumeGrid(total, phantom.density.voxel_size, ValueKind.NONNEGATIVE),
                                background_amplitude, background_sigma)


def fluence_for_photons(truth: GroundTruthIntensity, det: DetectorModel, mean_photons: float) -> float:
    return mean_photons / orientation_averaged_photons(truth.intensity.values, det)


def expected_counts(truth: GroundTruthIntensity, det: DetectorModel, rotation,
                    fluence_scale: float = 1.0, interpolation: str = "trilinear") -> np.ndarray:
    """Mean photon count of every pixel (zero on IGNORE pixels)."""
    R = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
    used = det.used
    q = det.pixel_q[used] @ R.T
    sample = grid.trilinear_sample if interpolation == "trilinear" else grid.nearest_sample
    vals = sample(truth.intensity.values, q)
    neg = vals < 0
    if neg.any():
        log.warning("clamped %d negative interpolated intensities to 0", int(neg.sum()))
        vals[neg] = 0.0
    out = np.zeros(det.num_pixels)
    out[used] = fluence_scale * det.pixel_weight[used] * vals
    return out


def simulate_frame(truth: GroundTruthIntensity, det: DetectorModel, rotation,
                   fluence_scale: float, rng: np.random.Generator, frame_id: int = 0) -> SparseFrame:
    if not fluence_scale > 0:
        raise ValueError("fluence_scale must be positive")
    rotation = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(rotation) - 1.0) > 1e-9:
        raise ValueError("rotation quaternion must have unit norm")
    lam = expected_counts(truth, det, rotation, fluence_scale)
    return SparseFrame.from_dense(rng.poisson(lam), frame_id)


@dataclass(frozen=True)
class FluenceDistribution:
    """Per-frame fluence scale: ``mean * exp(sigma * Z - sigma**2 / 2)``, Z ~ N(0, 1).

    ``sigma = 0`` gives a constant fluence.
    """

    mean: float = 1.0
    sigma: float = 0.3

    def sample(self, rng: np.random.Generator) -> float:
        if self.sigma == 0:
            return float(self.mean)
        return float(self.mean * np.exp(self.sigma * rng.standard_normal() - 0.5 * self.sigma ** 2))


@dataclass
class SimulatedDataset:
    frames: list[SparseFrame]
    quaternions: np.ndarray
    fluences: np.ndarray


def simulate_dataset(truth: GroundTruthIntensity, det: DetectorModel, n_frames: int,
                     fluence: FluenceDistribution, seed: int, workers: int = 1,
                     first_id: int = 0) -> SimulatedDataset:
    """Frames at Haar-random orientations; frame ``i`` uses stream ``(seed, i)``."""
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")

    def one(i):
        g = rngmod.stream(seed, 0, i)
        quat = random_rotations(1, g)[0]
        scale = fluence.sample(g)
        return simulate_frame(truth, det, quat, scale, g, first_id + i), quat, scale

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(n_frames)))
    else:
        out = [one(i) for i in range(n_frames)]
    frames = [o[0] for o in out]
    quats = np.array([o[1] for o in out]).reshape(-1, 4)
    scales = np.array([o[2] for o in out], dtype=np.float64)
    return SimulatedDataset(frames, quats, scales)
