"""Expand-Maximize-Compress merging of sparse frames into a 3D intensity.

Update equations (Poisson model, per-frame scale ``phi_d``, orientation
weights ``w_r``):

    W_rp   = pixel_weight_p * model(R_r q_p)                       (expand)
    L_dr   = sum_p K_dp log(phi_d W_rp) - phi_d sum_p W_rp          (USE_ALL pixels)
    P_dr   ~ w_r exp(beta (L_dr - max_r L_dr))                      (E-step)
    phi_d  = sum_p K_dp / sum_r P_dr sum_p W_rp                     (scales)
    model  = sum_rp t A_rp / sum_rp t B_rp pixel_weight_p           (compress)

with ``A_rp = sum_d P_dr K_dp``, ``B_r = sum_d P_dr phi_d`` and ``t`` the
trilinear weights of pixel ``p`` rotated by ``r``. See ``docs/math.md``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from spi import _kernels, dilute, grid, rng as rngmod
from spi.config import EmcConfig
from spi.dataio import SparseFrame, ValueKind, VolumeGrid
from spi.geometry import DetectorModel, RotationSet, quat_to_matrix

log = logging.getLogger(__name__)

CHUNK = 48
COLLAPSE_ROTATION_FRACTION = 0.01
COLLAPSE_FRAME_FRACTION = 0.9


def _mode(interpolation: str) -> int:
    return grid._mode(interpolation)


def expand(model: np.ndarray, det: DetectorModel, rotation,
           interpolation: str = "trilinear") -> np.ndarray:
    """Predicted intensity on every pixel for one orientation; IGNORE pixels are 0."""
    if np.any(model < 0):
        raise ValueError("model must be nonnegative")
    used = det.used
    R = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
    out = np.zeros(det.num_pixels)
    out[used] = det.pixel_weight[used] * grid.sample(model, det.pixel_q[used] @ R.T, interpolation)
    return out


def frame_log_likelihood(frame: SparseFrame, W: np.ndarray, scale: float,
                         det: DetectorModel | None = None) -> float:
    """``sum_p K log(scale W) - scale W`` over USE_ALL pixels (constants in K dropped)."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    W = np.asarray(W, dtype=np.float64)
    orient = det.orient if det is not None else np.ones(len(W), dtype=bool)
    K = frame.to_dense(len(W))
    hit = orient & (K > 0)
    return float(np.sum(K[hit] * np.log(scale * W[hit])) - scale * np.sum(W[orient]))


@dataclass
class IterationStats:
    iteration: int
    beta: float
    log_likelihood: float
    objective: float
    rms_change: float
    mean_scale: float
    argmax_entropy: float
    mean_pdo_entropy: float
    collapse_fraction: float
    collapsed: bool
    empty_voxels: int
    objective_next: float = float("nan")
    seconds: float = 0.0

    def line(self) -> str:
        return ("iter {:4d}  beta {:.6g}  loglik {:.10e}  Q {:.10e}  Q_next {:.10e}  "
                "rms {:.4e}  scale {:.5f}  H_argmax {:.4f}  H_pdo {:.4f}  "
                "collapse {:.3f}{}  empty {:d}  t {:.2f}s").format(
            self.iteration, self.beta, self.log_likelihood, self.objective,
            self.objective_next, self.rms_change, self.mean_scale, self.argmax_entropy,
            self.mean_pdo_entropy, self.collapse_fraction, "*" if self.collapsed else "",
            self.empty_voxels, self.seconds)


@dataclass
class EmcResult:
    model: VolumeGrid
    scales: np.ndarray
    frame_ids: np.ndarray
    excluded: np.ndarray
    most_likely: np.ndarray
    history: list[IterationStats] = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        return bool(self.history and self.history[-1].collapsed)

    @property
    def ever_collapsed(self) -> bool:
        return any(h.collapsed for h in self.history)


class EmcProblem:
    """Frames, detector and rotations prepared for repeated EM iterations."""

    def __init__(self, frames, det: DetectorModel, rotations: RotationSet, grid_size: int,
                 interpolation: str = "trilinear", workers: int = 1, deterministic: bool = True,
                 prob_floor: float = 1e-10):
        self.det = det
        self.rotations = rotations
        self.grid_size = int(grid_size)
        self.shape = (self.grid_size,) * 3
        self.interpolation = interpolation
        self.mode = _mode(interpolation)
        self.workers = max(1, int(workers))
        self.deterministic = deterministic
        self.prob_floor = prob_floor
        limit = (self.grid_size - 1) / 2.0 - (1.0 if interpolation == "trilinear" else 0.5)
        if det.q_max > limit:
            raise ValueError(f"detector reaches |q| = {det.q_max:.2f}, grid holds {limit:.2f}")

        self.used_idx = np.flatnonzero(det.used)
        self.q = np.ascontiguousarray(det.pixel_q[self.used_idx])
        self.w = np.ascontiguousarray(det.pixel_weight[self.used_idx])
        self.orient_cols = np.flatnonzero(det.orient[self.used_idx])
        self.mats = rotations.matrices()
        self.log_w_rot = np.log(rotations.weights)

        frames = list(frames)
        self.frame_ids = np.array([f.frame_id for f in frames], dtype=np.int64)
        col_of = np.full(det.num_pixels, -1, dtype=np.int64)
        col_of[self.used_idx] = np.arange(len(self.used_idx))
        K = np.zeros((len(frames), len(self.used_idx)))
        for i, fr in enumerate(frames):
            pix, cnt = fr.pixels_and_counts()
            if len(pix) and pix[-1] >= det.num_pixels:
                raise ValueError(f"frame {fr.frame_id} has pixels beyond the detector")
            c = col_of[pix]
            keep = c >= 0
            K[i, c[keep]] = cnt[keep]
        self.K = K
        self.K_orient = np.ascontiguousarray(K[:, self.orient_cols])
        self.photons_orient = self.K_orient.sum(axis=1)
        self.active = self.photons_orient > 0

    @property
    def num_frames(self) -> int:
        return len(self.K)

    def _chunks(self):
        n = len(self.rotations)
        return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]

    def _map(self, fn, items):
        if self.workers == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def expand_chunk(self, model: np.ndarray, lo: int, hi: int) -> np.ndarray:
        out = np.empty((hi - lo, len(self.q)))
        _kernels.expand_rotations(model, self.q, self.mats[lo:hi], self.w, self.mode, out)
        return out

    def log_likelihoods(self, model: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Matrix ``L[d, r]`` and the per-rotation sums of predicted orientation photons."""
        pos = model[model > 0]
        floor = 1e-12 * (pos.mean() if pos.size else 1.0)
        L = np.empty((self.num_frames, len(self.rotations)))
        sumW = np.empty(len(self.rotations))
        safe = np.where(scales > 0, scales, 1.0)
        const = self.photons_orient * np.log(safe)

        def work(bounds):
            lo, hi = bounds
            W = self.expand_chunk(model, lo, hi)[:, self.orient_cols]
            s = W.sum(axis=1)
            logW = np.log(np.maximum(W, floor))
            L[:, lo:hi] = self.K_orient @ logW.T + const[:, None] - np.outer(safe, s)
            sumW[lo:hi] = s

        self._map(work, self._chunks())
        return L, sumW

    def probabilities(self, L: np.ndarray, beta: float) -> np.ndarray:
        if not 0 < beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        z = beta * (L - L.max(axis=1, keepdims=True))
        P = np.exp(z) * self.rotations.weights
        P[z < np.log(self.prob_floor)] = 0.0
        total = P.sum(axis=1, keepdims=True)
        assert np.all(total > 0), "empty probability row"
        P /= total
        P[~self.active] = 0.0
        return P

    def update_scales(self, P: np.ndarray, sumW: np.ndarray) -> np.ndarray:
        denom = P @ sumW
        scales = np.zeros(self.num_frames)
        ok = self.active & (denom > 0)
        scales[ok] = self.photons_orient[ok] / denom[ok]
        return scales

    def compress(self, P: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, int]:
        """Merged, Friedel-symmetric model and the number of voxels never touched."""
        Pa = P[self.active]
        Ka = self.K[self.active]
        sa = scales[self.active]

        def work(bounds):
            lo, hi = bounds
            Pc = Pa[:, lo:hi]
            B = Pc.T @ sa
            keep = np.flatnonzero(B > 0)
            num = np.zeros(self.shape)
            den = np.zeros(self.shape)
            if keep.size:
                A = np.ascontiguousarray(Pc[:, keep].T @ Ka)
                _kernels.merge_rotations(num, den, self.q, np.ascontiguousarray(self.mats[lo + keep]),
                                         A, np.ascontiguousarray(B[keep]), self.w, self.mode)
            return num, den

        chunks = self._chunks()
        num = np.zeros(self.shape)
        den = np.zeros(self.shape)
        if self.deterministic or self.workers == 1:
            for n, d in self._map(work, chunks):
                num += n
                den += d
        else:
            with ThreadPoolExecutor(self.workers) as pool:
                for fut in as_completed([pool.submit(work, c) for c in chunks]):
                    n, d = fut.result()
                    num += n
                    den += d
        num = num + num[::-1, ::-1, ::-1]
        den = den + den[::-1, ::-1, ::-1]
        model = np.zeros(self.shape)
        hit = den > 0
        model[hit] = num[hit] / den[hit]
        return model, int(np.count_nonzero(~hit))

    def insert_tomogram(self, tomogram: np.ndarray, rotation) -> np.ndarray:
        """Insert one pixel-space tomogram (already divided by pixel weight)."""
        R = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
        pts = self.q @ R.T
        num = grid.scatter(pts, tomogram[self.used_idx] * self.w, self.shape,
                           interpolation=self.interpolation)
        den = grid.scatter(pts, self.w, self.shape, interpolation=self.interpolation)
        out = np.zeros(self.shape)
        hit = den > 0
        out[hit] = num[hit] / den[hit]
        return out


def e_step(problem: EmcProblem, model, scales, beta) -> np.ndarray:
    L, _ = problem.log_likelihoods(model, scales)
    return problem.probabilities(L, beta)


def update_scales(problem: EmcProblem, P, model) -> np.ndarray:
    _, sumW = problem.log_likelihoods(model, np.ones(problem.num_frames))
    return problem.update_scales(P, sumW)


def compress(problem: EmcProblem, P, scales) -> np.ndarray:
    return problem.compress(P, scales)[0]


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def collapse_fraction(most_likely: np.ndarray, num_rotations: int) -> float:
    """Fraction of frames whose best orientation lies in the top 1% most popular orientations."""
    if len(most_likely) == 0:
        return 0.0
    occupancy = np.sort(np.bincount(most_likely, minlength=num_rotations))[::-1]
    top = max(1, int(np.ceil(COLLAPSE_ROTATION_FRACTION * num_rotations)))
    return float(occupancy[:top].sum() / len(most_likely))


def random_start(problem: EmcProblem, seed: int) -> np.ndarray:
    """Uniform(0, 1) voxels inside the detector sphere, rescaled to the mean photon count."""
    g = rngmod.stream(seed, 3)
    model = g.random(problem.shape)
    r = grid.radius(problem.shape)
    model[r > problem.det.q_max + 1.0] = 0.0
    mid = len(problem.rotations) // 2
    predicted = problem.expand_chunk(model, mid, mid + 1)[0][problem.orient_cols].sum()
    target = problem.photons_orient[problem.active].mean() if problem.active.any() else 1.0
    if predicted > 0:
        model *= target / predicted
    return model


def run_emc(frames, det: DetectorModel, rotations: RotationSet, config: EmcConfig,
            workers: int = 1, deterministic: bool = True, initial_model=None,
            log_path=None, callback=None) -> EmcResult:
    """Iterate E-step, scale update and compress for ``config.num_iter`` iterations.

    The collapse flag marks iterations where more than 90% of frames have
    their most likely orientation inside the 1% most popular orientations.
    """
    frames = dilute.select(frames, config.selection)
    if not frames:
        raise ValueError("no frames selected")
    grid_size = config.grid_size or det.min_grid_size()
    prob = EmcProblem(frames, det, rotations, grid_size, config.interpolation, workers,
                      deterministic, config.prob_floor)
    if not prob.active.any():
        raise ValueError("every frame is empty on the orientation pixels")
    model = random_start(prob, config.seed) if initial_model is None else np.array(initial_model, dtype=np.float64)
    scales = np.where(prob.active, 1.0, 0.0)

    fh = open(log_path, "a") if log_path else None
    history: list[IterationStats] = []
    most_likely = np.zeros(prob.num_frames, dtype=np.int64)
    prev_P = None
    try:
        for it in range(config.num_iter):
            t0 = time.perf_counter()
            beta = config.beta_at(it)
            L, sumW = prob.log_likelihoods(model, scales)
            act = prob.active
            if prev_P is not None:
                history[-1].objective_next = float(np.sum(prev_P[act] * (L[act] + prob.log_w_rot)))
            P = prob.probabilities(L, beta)
            loglik = float(logsumexp(L[act] + prob.log_w_rot, axis=1).sum())
            objective = float(np.sum(P[act] * (L[act] + prob.log_w_rot)))
            if config.need_scaling:
                scales = prob.update_scales(P, sumW)
            new_model, empty = prob.compress(P, scales)
            rms = float(np.sqrt(np.mean((new_model - model) ** 2)))
            model = new_model
            most_likely = np.argmax(P, axis=1)
            ml = most_likely[act]
            hist = np.bincount(ml, minlength=len(rotations)) / max(len(ml), 1)
            cf = collapse_fraction(ml, len(rotations))
            row_h = [_entropy(p) for p in P[act]]
            stats = IterationStats(
                iteration=it + 1, beta=beta, log_likelihood=loglik, objective=objective,
                rms_change=rms, mean_scale=float(scales[act].mean()),
                argmax_entropy=_entropy(hist), mean_pdo_entropy=float(np.mean(row_h)),
                collapse_fraction=cf, collapsed=cf > COLLAPSE_FRAME_FRACTION,
                empty_voxels=empty, seconds=time.perf_counter() - t0)
            history.append(stats)
            prev_P = P
            if stats.collapsed:
                log.info("iteration %d: orientation collapse (%.0f%% of frames in 1%% of orientations)",
                         it + 1, 100 * cf)
            if fh:
                fh.write(stats.line() + "\n")
                fh.flush()
            if callback is not None:
                callback(stats, model, scales)
    finally:
        if fh:
            fh.close()

    if history and history[-1].collapsed:
        log.warning("orientations collapsed: %.0f%% of frames in 1%% of orientations at the last iteration",
                    100 * history[-1].collapse_fraction)
    return EmcResult(
        model=VolumeGrid(model, det.voxel_size, ValueKind.NONNEGATIVE),
        scales=scales,
        frame_ids=prob.frame_ids,
        excluded=~prob.active,
        most_likely=most_likely,
        history=history,
    )


def final_objective(frames, det, rotations, result: EmcResult, config: EmcConfig,
                    beta: float = 1.0) -> float:
    """Expected log-likelihood of the final state under its own posterior (diagnostics)."""
    frames = dilute.select(frames, config.selection)
    prob = EmcProblem(frames, det, rotations, result.model.edge_length, config.interpolation)
    L, _ = prob.log_likelihoods(result.model.values, result.scales)
    P = prob.probabilities(L, beta)
    act = prob.active
    return float(np.sum(P[act] * (L[act] + prob.log_w_rot)))


def write_log_header(path, config: EmcConfig, n_frames: int, n_rot: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# EMC  frames={n_frames} rotations={n_rot} num_div={config.num_div} "
                 f"beta={config.beta} schedule={config.beta_factor} every {config.beta_interval} "
                 f"need_scaling={int(config.need_scaling)} selection={config.selection}\n")
