"""Shell-wise reconstruction metrics, resolution cutoffs and volume alignment.

Shells are unit-thickness spheres about the grid origin, ``shell = floor(|q|)``
in voxels. Resolutions are reported as full periods ``d = 1 / q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from spi import grid
from spi.dataio import frames_to_matrix
from spi.geometry import quat_multiply, quat_to_matrix, sample_rotations

ONE_OVER_E = float(np.exp(-1.0))
HALF_BIT_ASYMPTOTE = 0.2071 / 1.2071


@dataclass
class ShellCurve:
    """Per-shell values; ``q_centers`` is the mean ``|q|`` (voxels) of each shell."""

    q_centers: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    shells: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def table(self, voxel_size: float | None = None) -> str:
        """Two-column text table ``q value`` (q in inverse length if ``voxel_size`` given)."""
        q = self.q_centers * (voxel_size or 1.0)
        return "\n".join(f"{a:.8g} {b:.10g}" for a, b in zip(q, self.values))


def _bins(shape, shells, mask, max_shell):
    """Flat shell index, per-voxel inclusion weight, voxel counts and mean ``|q|`` per shell."""
    shells = grid.shell_index(shape) if shells is None else np.asarray(shells)
    ok = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    ok &= shells >= 0
    if max_shell is not None:
        ok &= shells <= max_shell
    idx = np.where(ok, shells, 0).ravel()
    w = ok.ravel().astype(np.float64)
    n = int(shells[ok].max()) + 1 if ok.any() else 0
    counts = np.bincount(idx, weights=w, minlength=n)
    qsum = np.bincount(idx, weights=w * grid.radius(shape).ravel(), minlength=n)
    return idx, w, n, counts, qsum


def _curve(vals, counts, qsum) -> ShellCurve:
    present = np.flatnonzero(counts > 0)
    return ShellCurve(qsum[present] / counts[present], vals[present], counts[present], present)


def fsc(F1, F2, shells=None, mask=None, max_shell=None) -> ShellCurve:
    """``Re sum F1 F2* / sqrt(sum |F1|^2 sum |F2|^2)`` per shell."""
    F1 = np.asarray(F1)
    F2 = np.asarray(F2)
    if F1.shape != F2.shape:
        raise ValueError("volumes must share one grid")
    idx, w, n, counts, qsum = _bins(F1.shape, shells, mask, max_shell)
    cross = np.bincount(idx, weights=w * (F1 * np.conj(F2)).real.ravel(), minlength=n)
    a = np.bincount(idx, weights=w * (np.abs(F1) ** 2).ravel(), minlength=n)
    b = np.bincount(idx, weights=w * (np.abs(F2) ** 2).ravel(), minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = cross / np.sqrt(a * b)
    vals[(a == 0) | (b == 0)] = np.nan
    return _curve(vals, counts, qsum)


def cc_half(I1, I2, shells=None, mask=None, max_shell=None) -> ShellCurve:
    """Pearson correlation per shell (means subtracted shell by shell)."""
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    if I1.shape != I2.shape:
        raise ValueError("volumes must share one grid")
    idx, w, n, counts, qsum = _bins(I1.shape, shells, mask, max_shell)
    with np.errstate(invalid="ignore", divide="ignore"):
        m1 = np.bincount(idx, weights=w * I1.ravel(), minlength=n) / counts
        m2 = np.bincount(idx, weights=w * I2.ravel(), minlength=n) / counts
        d1 = np.where(w > 0, I1.ravel() - m1[idx], 0.0)
        d2 = np.where(w > 0, I2.ravel() - m2[idx], 0.0)
        cov = np.bincount(idx, weights=d1 * d2, minlength=n)
        v1 = np.bincount(idx, weights=d1 * d1, minlength=n)
        v2 = np.bincount(idx, weights=d2 * d2, minlength=n)
        vals = cov / np.sqrt(v1 * v2)
    vals[(v1 == 0) | (v2 == 0)] = np.nan
    return _curve(np.clip(vals, -1.0, 1.0), counts, qsum)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else float("nan")


def prtf(solutions, shells=None, fourier: bool = False, max_shell=None) -> ShellCurve:
    """Shell mean of ``|<exp(i phi_n)>|`` over aligned solutions.

    ``solutions`` are real-space densities unless ``fourier`` is set. At each
    voxel only solutions with nonzero amplitude enter the mean.
    """
    sols = [np.asarray(s) for s in solutions]
    if len(sols) < 2:
        raise ValueError("PRTF needs at least two solutions")
    total = np.zeros(sols[0].shape, dtype=np.complex128)
    count = np.zeros(sols[0].shape)
    for s in sols:
        F = s if fourier else grid.fft3(s)
        amp = np.abs(F)
        nz = amp > 0
        total[nz] += F[nz] / amp[nz]
        count += nz
    with np.errstate(invalid="ignore", divide="ignore"):
        per_voxel = np.abs(total) / count
    return shell_mean(per_voxel, shells, count > 0, max_shell)


def shell_mean(vol, shells=None, mask=None, max_shell=None) -> ShellCurve:
    vol = np.asarray(vol, dtype=np.float64)
    idx, w, n, counts, qsum = _bins(vol.shape, shells, mask, max_shell)
    sums = np.bincount(idx, weights=np.where(w > 0, vol.ravel(), 0.0), minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = sums / counts
    return _curve(vals, counts, qsum)


def half_bit_threshold(counts) -> np.ndarray:
    """Half-bit information curve of van Heel and Schatz (2005), ``counts`` voxels per shell."""
    n = np.sqrt(np.asarray(counts, dtype=np.float64))
    return (0.2071 + 1.9102 / n) / (1.2071 + 0.9102 / n)


@dataclass
class Crossing:
    """Threshold crossings in voxel units; ``None`` means the curve never drops below."""

    first_q: float | None
    last_q: float | None

    @property
    def beyond_range(self) -> bool:
        return self.first_q is None

    def resolution(self, voxel_size: float = 1.0, which: str = "first") -> float | None:
        """Full-period resolution ``1 / q`` in the reciprocal of ``voxel_size``'s units."""
        q = self.first_q if which == "first" else self.last_q
        if q is None:
            return None
        return float(np.inf) if q == 0 else 1.0 / (q * voxel_size)


def threshold_crossing(curve: ShellCurve, kind="half_bit") -> Crossing:
    """First and last ``q`` where the curve drops from above to below the threshold.

    ``kind`` is ``"half_bit"`` or a fixed number. The crossing is interpolated
    linearly between the last shell above and the first shell below.
    NaN shells are skipped. The zero-frequency shell never counts as below the
    threshold, and for the half-bit curve it lies exactly on it: a lone DC
    voxel has a half-bit threshold of 1, so its sign is rounding noise. A curve
    below the threshold at every ``q > 0`` crosses at ``q = 0`` (infinite ``d``).
    """
    if len(curve) == 0:
        raise ValueError("empty curve")
    keep = np.isfinite(curve.values)
    q = curve.q_centers[keep]
    v = curve.values[keep]
    if kind == "half_bit":
        t = half_bit_threshold(curve.counts[keep])
    else:
        t = np.full(len(v), float(kind))
    d = v - t
    d[q == 0] = 0.0 if kind == "half_bit" else np.maximum(d[q == 0], 0.0)
    below = np.flatnonzero(d < 0)
    if below.size == 0:
        return Crossing(None, None)

    def at(k):
        if k == 0:
            return float(q[0])
        return float(q[k - 1] + d[k - 1] / (d[k - 1] - d[k]) * (q[k] - q[k - 1]))

    down = [k for k in below if k == 0 or d[k - 1] >= 0]
    return Crossing(at(down[0]), at(down[-1]))


# --- rotational alignment ------------------------------------------------------

@dataclass
class RotationAlignment:
    """``aligned(x) = I2(R x)`` with ``R`` from ``quaternion``."""

    quaternion: np.ndarray
    aligned: np.ndarray
    cc: float
    degenerate: bool
    curve: ShellCurve


def _rotated(vol, pts, q):
    R = quat_to_matrix(q)
    return grid.sample(vol, pts @ R.T)


def rotate_volume(vol: np.ndarray, quaternion) -> np.ndarray:
    """Resample ``vol`` so that ``out(x) = vol(R x)``."""
    x, y, z = np.meshgrid(*[np.arange(n) - n // 2 for n in vol.shape], indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.float64)
    return _rotated(vol, pts, np.asarray(quaternion, dtype=np.float64)).reshape(vol.shape)


def _small_rotations(step: float) -> np.ndarray:
    dirs = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) != (0, 0, 0)], dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    half = 0.5 * step
    return np.hstack([np.full((len(dirs), 1), np.cos(half)), np.sin(half) * dirs])


def _shell_normalized(vol: np.ndarray) -> np.ndarray:
    shells = grid.shell_index(vol.shape)
    prof = grid.radial_mean(vol, shells)
    prof = np.where(np.abs(prof) > 0, prof, 1.0)
    return vol / prof[shells]


def align_rotation(I1, I2, radius_range=(2.0, None), num_div: int = 4, tol: float = 1e-3,
                   max_points: int = 40000, candidates: int = 8, seed: int = 0) -> RotationAlignment:
    """Rotation maximizing the pooled Pearson CC of ``I1`` and rotated ``I2``.

    Both volumes are first divided by their radial mean profiles so that every
    shell in ``radius_range`` carries comparable weight. The search runs in
    three levels: all of ``sample_rotations(num_div)`` scored on low shells
    only, where the score varies slowly; a pattern search from the best
    ``candidates`` on twice that radius; and a final pattern search on the
    full range, halving the angular step down to ``tol`` radians.
    """
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    if I1.shape != I2.shape:
        raise ValueError("volumes must share one grid")
    r = grid.radius(I1.shape)
    lo, hi = radius_range
    hi = I1.shape[0] // 2 if hi is None else hi
    ref_vol = _shell_normalized(I1)
    mov = np.ascontiguousarray(_shell_normalized(I2))
    g = np.random.default_rng(seed)

    def scorer(r_hi):
        idx = np.flatnonzero(((r >= lo) & (r <= max(r_hi, lo + 1))).ravel())
        if idx.size > max_points:
            idx = np.sort(g.choice(idx, max_points, replace=False))
        pts = (np.stack(np.unravel_index(idx, I1.shape), axis=1) - np.asarray(I1.shape) // 2).astype(np.float64)
        ref = ref_vol.ravel()[idx]

        def score(q):
            v = pearson(ref, _rotated(mov, pts, q))
            return v if np.isfinite(v) else -np.inf
        return score

    spacing = _spacing(num_div)
    r_coarse = min(hi, max(lo + 2.0, 2.0 / spacing))
    score = scorer(r_coarse)
    coarse = sample_rotations(num_div).quaternions
    scores = np.array([score(q) for q in coarse])
    finite = scores[np.isfinite(scores)]
    degenerate = bool(finite.size == 0 or np.ptp(finite) < 1e-6)

    score = scorer(min(hi, 2.0 * r_coarse))
    best = []
    for k in np.argsort(-scores, kind="stable")[:candidates]:
        best.append(_pattern_search(score, coarse[k], 0.5 * spacing, 0.25 * spacing))
    q_best = max(best, key=lambda b: b[1])[0]

    score = scorer(hi)
    q_best, s_best = _pattern_search(score, q_best, 0.25 * spacing, tol)
    if q_best[0] < 0:
        q_best = -q_best
    aligned = rotate_volume(I2, q_best)
    curve = cc_half(I1, aligned)
    return RotationAlignment(q_best, aligned, float(s_best), degenerate, curve)


def _pattern_search(score, q, step, tol):
    s = score(q)
    while step > tol:
        cand = quat_multiply(_small_rotations(step), q)
        vals = np.array([score(c) for c in cand])
        k = int(np.argmax(vals))
        if vals[k] > s:
            q, s = cand[k] / np.linalg.norm(cand[k]), vals[k]
        else:
            step *= 0.5
    return q, s


def _spacing(num_div: int) -> float:
    """Approximate nearest-neighbour angle of ``sample_rotations(num_div)`` in radians."""
    # 600-cell vertices are 36 degrees apart as rotations; refinement divides the edge
    return np.deg2rad(36.0) / num_div


# --- data diagnostics ------------------------------------------------------------

def powder_sum(frames, num_pixels: int, shape=None) -> np.ndarray:
    """Per-pixel photon totals over all frames."""
    frames = list(frames)
    if not frames:
        total = np.zeros(num_pixels)
    else:
        total = np.asarray(frames_to_matrix(frames, num_pixels).sum(axis=0)).ravel().astype(np.float64)
    return total.reshape(shape) if shape is not None else total


def density_histogram(rho, support_mask=None, bins=50, range=None):
    """Histogram of ``|rho|`` over the support; returns ``(counts, edges)``."""
    vals = np.abs(np.asarray(rho))
    if support_mask is not None:
        vals = vals[np.asarray(support_mask, dtype=bool)]
    return np.histogram(vals.ravel(), bins=bins, range=range)


def bimodality_coefficient(values) -> float:
    """Sarle's coefficient ``(g^2 + 1) / (k + 3 (n-1)^2 / ((n-2)(n-3)))``; > 5/9 hints at bimodality."""
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        raise ValueError("need at least four values")
    g = stats.skew(x, bias=False)
    k = stats.kurtosis(x, bias=False)
    return float((g * g + 1.0) / (k + 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))))
