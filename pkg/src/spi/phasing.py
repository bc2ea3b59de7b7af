"""Background-aware iterative phase retrieval with a voxel-number support.

The iterate is a pair ``(rho, B)``: a complex real-space density and a real
background magnitude on the Fourier grid. The calculated intensity is
``|F[rho]|**2 + B**2``. Distances between iterates use the metric

    ||x||**2 = ||F[rho]||**2 + ||B||**2 = V ||rho||**2 + ||B||**2

(``V`` voxels, unnormalized DFT), in which both projections below are
orthogonal projections.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import optimize

from spi import grid, rng as rngmod
from spi.config import PhasingConfig, parse_iteration_string

log = logging.getLogger(__name__)

FREE = 0
CONSTRAINED = 1
# outer_mask / edge radius used by the reference reconstruction (57 of 64)
DEFAULT_OUTER_FRACTION = 57.0 / 64.0


fft = grid.fft3
ifft = grid.ifft3


@dataclass
class PhaseIterate:
    """Real-space density ``rho`` (complex) and background magnitude ``B``."""

    rho: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.complex128)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.rho.shape != self.B.shape:
            raise ValueError("rho and B must share one grid")
        if not np.all(np.isfinite(self.B)):
            raise ValueError("B must be finite")

    def __add__(self, other: "PhaseIterate") -> "PhaseIterate":
        return PhaseIterate(self.rho + other.rho, self.B + other.B)

    def __sub__(self, other: "PhaseIterate") -> "PhaseIterate":
        return PhaseIterate(self.rho - other.rho, self.B - other.B)

    def __mul__(self, c: float) -> "PhaseIterate":
        return PhaseIterate(self.rho * c, self.B * c)

    __rmul__ = __mul__

    def copy(self) -> "PhaseIterate":
        return PhaseIterate(self.rho.copy(), self.B.copy())

    def norm(self) -> float:
        """Norm in the Fourier-space metric."""
        return float(np.sqrt(self.rho.size * np.vdot(self.rho, self.rho).real
                             + np.dot(self.B.ravel(), self.B.ravel())))


@dataclass
class IntensityConstraint:
    """Measured intensity with a CONSTRAINED / FREE voxel map.

    Voxels with ``inner <= |q| < outer`` are constrained; the central ball and
    everything beyond ``outer`` are left to the iterate.
    """

    I_meas: np.ndarray
    mask: np.ndarray
    shells: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, I_meas, inner: float = 6.0, outer: float | None = None) -> "IntensityConstraint":
        I = np.asarray(I_meas, dtype=np.float64)
        if I.ndim != 3 or len(set(I.shape)) != 1:
            raise ValueError("I_meas must be a cube")
        r = grid.radius(I.shape)
        if outer is None:
            outer = default_outer_mask(I)
        mask = np.where((r >= inner) & (r < outer), CONSTRAINED, FREE).astype(np.uint8)
        if np.any(I[mask == CONSTRAINED] < 0) or not np.all(np.isfinite(I[mask == CONSTRAINED])):
            raise ValueError("I_meas must be finite and nonnegative on constrained voxels")
        return cls(I, mask, grid.shell_index(I.shape))

    @property
    def constrained(self) -> np.ndarray:
        return self.mask == CONSTRAINED

    @property
    def shape(self):
        return self.I_meas.shape


def data_radius(I: np.ndarray) -> float:
    """Largest voxel radius holding a positive intensity."""
    r = grid.radius(I.shape)
    pos = I > 0
    return float(r[pos].max()) if pos.any() else 0.0


def default_outer_mask(I: np.ndarray) -> float:
    return np.floor(DEFAULT_OUTER_FRACTION * data_radius(I))


def calc_intensity(psi: PhaseIterate) -> np.ndarray:
    return np.abs(fft(psi.rho)) ** 2 + psi.B ** 2


def _modulus(F: np.ndarray, B: np.ndarray, c: IntensityConstraint, background: bool):
    """Rescale ``(Re F, Im F, B)`` onto the measured modulus on constrained voxels."""
    F = F.copy()
    B = B.copy()
    m = c.constrained
    target = np.sqrt(c.I_meas[m])
    Fm, Bm = F[m], B[m]
    if not background:
        Bm = np.zeros_like(Bm)
    amp = np.sqrt(np.abs(Fm) ** 2 + Bm ** 2)
    ok = amp > 0
    ratio = np.where(ok, target / np.where(ok, amp, 1.0), 0.0)
    Fm = Fm * ratio
    Bm = Bm * ratio
    # zero calculated amplitude: no phase to keep, so the magnitude goes to B
    if background:
        Bm[~ok] = target[~ok]
    else:
        Fm[~ok] = target[~ok]
    F[m] = Fm
    B[m] = Bm
    return F, B


def project_modulus(psi: PhaseIterate, constraint: IntensityConstraint,
                    background: bool = True) -> PhaseIterate:
    F, B = _modulus(fft(psi.rho), psi.B, constraint, background)
    return PhaseIterate(ifft(F), B)


def _top_n_mask(rho: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask of the ``n`` largest ``|rho|``; ties go to the lower linear index."""
    flat = np.abs(rho.ravel()) ** 2
    keep = np.zeros(flat.size, dtype=bool)
    if n >= flat.size:
        keep[:] = True
    elif n > 0:
        thr = np.partition(flat, flat.size - n)[flat.size - n]
        above = flat > thr
        keep |= above
        # fill the remaining slots with the lowest-index voxels equal to the threshold
        tied = np.flatnonzero(flat == thr)
        keep[tied[: n - int(above.sum())]] = True
    return keep.reshape(rho.shape)


def project_support(psi: PhaseIterate, voxel_number: int, shells: np.ndarray | None = None,
                    background: bool = True) -> PhaseIterate:
    """Keep the ``voxel_number`` strongest density voxels; radially average ``B``."""
    if not 0 < voxel_number < psi.rho.size:
        raise ValueError("voxel_number must lie in (0, grid volume)")
    rho = np.where(_top_n_mask(psi.rho, voxel_number), psi.rho, 0)
    B = radial_projection(psi.B, shells) if background else np.zeros_like(psi.B)
    return PhaseIterate(rho, B)


def radial_projection(B: np.ndarray, shells: np.ndarray | None = None) -> np.ndarray:
    """Nearest spherically symmetric, nonnegative magnitude: shell means clipped at 0."""
    if shells is None:
        shells = grid.shell_index(B.shape)
    return np.maximum(grid.radial_mean(B, shells), 0.0)[shells]


class Projector:
    """Both projections bound to one constraint and support size."""

    def __init__(self, constraint: IntensityConstraint, voxel_number: int, background: bool = True):
        self.constraint = constraint
        self.voxel_number = int(voxel_number)
        self.background = background

    def P_M(self, psi: PhaseIterate) -> PhaseIterate:
        return project_modulus(psi, self.constraint, self.background)

    def P_S(self, psi: PhaseIterate) -> PhaseIterate:
        return project_support(psi, self.voxel_number, self.constraint.shells, self.background)


def er_iteration(psi: PhaseIterate, proj: Projector) -> tuple[PhaseIterate, float]:
    """``P_M(P_S(x))`` and the error ``||P_M(x') - P_S(x')||``."""
    new = proj.P_M(proj.P_S(psi))
    # new already lies in the modulus set, so P_M(new) = new
    return new, (new - proj.P_S(new)).norm()


def dm_iteration(psi: PhaseIterate, proj: Projector, beta: float = 0.7) -> tuple[PhaseIterate, float]:
    """Difference-map step ``x + beta [P_M(f_S(x)) - P_S(f_M(x))]`` with

        f_M(x) = (1 - 1/beta) P_M(x) + x / beta
        f_S(x) = (1 + 1/beta) P_S(x) - x / beta

    Returns the new iterate and ``||P_M(f_S) - P_S(f_M)||``.
    """
    pm = proj.P_M(psi)
    ps = proj.P_S(psi)
    f_M = (1.0 - 1.0 / beta) * pm + psi * (1.0 / beta)
    f_S = (1.0 + 1.0 / beta) * ps - psi * (1.0 / beta)
    diff = proj.P_M(f_S) - proj.P_S(f_M)
    return psi + beta * diff, diff.norm()


def random_iterate(constraint: IntensityConstraint, rng: np.random.Generator,
                   background: bool = True, background_scale: float = 1.0) -> PhaseIterate:
    """``rho ~ U(0, 1)`` (real) and ``B ~ U(0, scale * mean sqrt(I_meas))``."""
    shape = constraint.shape
    rho = rng.random(shape).astype(np.complex128)
    if background:
        vals = constraint.I_meas[constraint.constrained]
        top = background_scale * (np.sqrt(vals).mean() if vals.size else 0.0)
        B = rng.random(shape) * top
    else:
        B = np.zeros(shape)
    return PhaseIterate(rho, B)


@dataclass
class PhaseRun:
    """One random start.

    ``final`` is the last iterate of the plan; ``solution`` is its support
    projection (density inside the voxel-number support, symmetric background),
    which is what gets aligned and averaged.
    """

    initial: PhaseIterate
    final: PhaseIterate
    solution: PhaseIterate
    errors: np.ndarray
    seed_key: tuple


def run_plan(psi: PhaseIterate, proj: Projector, plan, dm_beta: float = 0.7):
    errors = []
    for algo, count in plan:
        for _ in range(count):
            if algo == "ER":
                psi, err = er_iteration(psi, proj)
            else:
                psi, err = dm_iteration(psi, proj, dm_beta)
            errors.append(err)
    return psi, np.array(errors)


def run_phasing(I_meas, config: PhasingConfig, workers: int = 1,
                constraint: IntensityConstraint | None = None) -> list[PhaseRun]:
    """Independent random starts; repeat ``i`` draws from stream ``(seed, 4, i)``.

    Error traces are divided by ``sqrt(sum I_meas)`` over constrained voxels.
    """
    if constraint is None:
        constraint = IntensityConstraint.build(I_meas, config.inner_mask, config.outer_mask)
    proj = Projector(constraint, config.voxel_number, config.background)
    plan = parse_iteration_string(config.iters)
    norm = np.sqrt(constraint.I_meas[constraint.constrained].sum()) or 1.0

    def one(i):
        g = rngmod.stream(config.seed, 4, i)
        init = random_iterate(constraint, g, config.background, config.init_background_scale)
        psi, errors = run_plan(init, proj, plan, config.dm_beta)
        return PhaseRun(init, psi, proj.P_S(psi), errors / norm, (config.seed, 4, i))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(config.repeats)))
    return [one(i) for i in range(config.repeats)]


# --- alignment and averaging -------------------------------------------------

def _circular_centroid(w: np.ndarray) -> np.ndarray:
    """Weighted centroid along each axis on a periodic grid, relative to the origin voxel."""
    M = w.shape[0]
    out = np.empty(3)
    total = w.sum()
    for ax in range(3):
        prof = w.sum(axis=tuple(a for a in range(3) if a != ax))
        ang = 2 * np.pi * (np.arange(M) - M // 2) / M
        z = np.sum(prof * np.exp(1j * ang)) / total
        out[ax] = np.angle(z) * M / (2 * np.pi)
    return out


def shift_volume(vol: np.ndarray, shift) -> np.ndarray:
    """Periodic translation by ``shift`` voxels: integer roll plus Fourier phase ramp."""
    shift = np.asarray(shift, dtype=np.float64)
    whole = np.round(shift).astype(int)
    out = np.roll(vol, tuple(whole), axis=(0, 1, 2))
    frac = shift - whole
    if np.any(frac != 0):
        if any(n % 2 == 0 for n in vol.shape):
            raise ValueError("subvoxel shifts need odd edge lengths")
        k = [sfft.fftfreq(n) for n in vol.shape]
        ramp = np.exp(-2j * np.pi * (k[0][:, None, None] * frac[0] + k[1][None, :, None] * frac[1]
                                     + k[2][None, None, :] * frac[2]))
        out = sfft.ifftn(sfft.fftn(out) * ramp)
        if not np.iscomplexobj(vol):
            out = out.real
    return out


def center_density(rho: np.ndarray) -> np.ndarray:
    """Move the ``|rho|``-weighted centroid onto the origin voxel."""
    w = np.abs(rho)
    if w.sum() == 0:
        return rho.copy()
    return shift_volume(rho, -_circular_centroid(w))


def remove_global_phase(rho: np.ndarray) -> np.ndarray:
    """Rotate phases so that the density-weighted mean phase ``arg(sum rho)`` is 0."""
    s = rho.sum()
    if s == 0:
        return rho.copy()
    return rho * np.exp(-1j * np.angle(s))


def invert(rho: np.ndarray) -> np.ndarray:
    """Central inversion ``conj(rho(-x))``, which has the same Fourier modulus."""
    return np.conj(rho[::-1, ::-1, ::-1])


def align_solutions(solutions) -> list[np.ndarray]:
    """Center, remove the global phase, and resolve the inversion against the first solution."""
    solutions = [np.asarray(s, dtype=np.complex128) for s in solutions]
    if not solutions:
        raise ValueError("need at least one solution")
    out = [remove_global_phase(center_density(s)) for s in solutions]
    ref = out[0]
    for i in range(1, len(out)):
        twin = invert(out[i])
        if np.linalg.norm(twin - ref) < np.linalg.norm(out[i] - ref):
            out[i] = twin
    return out


def _register(G: np.ndarray) -> tuple[np.ndarray, complex]:
    """Shift maximizing ``|sum G exp(2 pi i k.s)|`` for a cross-spectrum ``G`` (unshifted layout).

    Integer peak of the cross-correlation, a Nelder-Mead search, then Newton
    steps on ``|overlap|^2`` with analytic derivatives.
    """
    xc = sfft.ifftn(G)
    peak = np.array(np.unravel_index(np.argmax(np.abs(xc)), G.shape), dtype=np.float64)
    n = np.asarray(G.shape)
    peak = np.where(peak > n // 2, peak - n, peak)
    k = [sfft.fftfreq(m) for m in G.shape]
    K = np.meshgrid(*k, indexing="ij")

    def terms(s):
        return G * np.exp(2j * np.pi * (K[0] * s[0] + K[1] * s[1] + K[2] * s[2])) / G.size

    def overlap(s):
        return terms(s).sum()

    res = optimize.minimize(lambda s: -abs(overlap(s)), peak, method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-14 * abs(overlap(peak)),
                                     "initial_simplex": peak + 0.3 * np.vstack([np.zeros(3), np.eye(3)]),
                                     "maxiter": 2000})
    s = res.x
    for _ in range(8):
        t = terms(s)
        o = t.sum()
        w = 2j * np.pi
        d1 = np.array([(w * Ka * t).sum() for Ka in K])
        d2 = np.array([[(w * w * Ka * Kb * t).sum() for Kb in K] for Ka in K])
        grad = 2 * (np.conj(o) * d1).real
        hess = 2 * (np.conj(d1)[:, None] * d1[None, :] + np.conj(o) * d2).real
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.abs(step).max() > 0.5:
            break
        s = s - step
        if np.abs(step).max() < 1e-13:
            break
    if abs(overlap(s)) < abs(overlap(res.x)):
        s = res.x
    return s, overlap(s)


def align_to(reference: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Register ``rho`` onto ``reference`` for pairwise comparison.

    The inversion twin, the (subvoxel) translation and the global phase are
    chosen to maximize the overlap ``|<reference, rho>|``, which minimizes the
    L2 distance. ``reference`` is not moved.
    """
    ref = np.asarray(reference, dtype=np.complex128)
    rho = np.asarray(rho, dtype=np.complex128)
    Fref = sfft.fftn(ref)
    best, score = rho, -1.0
    for cand in (rho, invert(rho)):
        shift, ov = _register(np.conj(Fref) * sfft.fftn(cand))
        if abs(ov) > score:
            if any(n % 2 == 0 for n in rho.shape):
                shift = np.round(shift)
            moved = shift_volume(cand, -shift)
            phase = np.vdot(moved, ref)
            best = moved * np.exp(1j * np.angle(phase)) if phase != 0 else moved
            score = abs(ov)
    return best


@dataclass
class PhasingAverage:
    density: np.ndarray
    background: np.ndarray
    aligned: list[np.ndarray]

    def background_profile(self) -> tuple[np.ndarray, np.ndarray]:
        """Shell index and mean background magnitude per unit shell."""
        prof = grid.radial_mean(self.background)
        return np.arange(len(prof)), prof


def average_solutions(aligned, backgrounds=None) -> PhasingAverage:
    aligned = [np.asarray(a, dtype=np.complex128) for a in aligned]
    density = np.mean(aligned, axis=0)
    if backgrounds is None:
        background = np.zeros(density.shape)
    else:
        background = np.mean([np.asarray(b, dtype=np.float64) for b in backgrounds], axis=0)
    return PhasingAverage(density, background, aligned)


def reconstruct(I_meas, config: PhasingConfig, workers: int = 1):
    """Phase every repeat, align and average; returns ``(average, runs)``."""
    runs = run_phasing(I_meas, config, workers)
    aligned = align_solutions([r.solution.rho for r in runs])
    return average_solutions(aligned, [r.solution.B for r in runs]), runs
