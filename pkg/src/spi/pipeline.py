"""Dilution and frame-count sweeps: simulate, thin, split, merge, phase, score.

Every random stream is derived from the master seed by :func:`seed_manager`,
and every job is self-contained, so the report depends only on the config
and the master seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import traceback
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from spi import dilute, grid, metrics, phasing
from spi.config import EmcConfig, PipelineConfig, parse_fraction
from spi.dataio import VolumeGrid, ValueKind, read_frames, write_volume
from spi.emc import run_emc
from spi.errors import StageError
from spi.geometry import DetectorModel, ExperimentGeometry, build_detector, read_detector, read_mask, sample_rotations
from spi.simulate import (FluenceDistribution, PhantomParams, fluence_for_photons, make_phantom,
                          make_truth, simulate_dataset)

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def seed_manager(master_seed: int, stage: str, replicate: int = 0, fraction="1") -> int:
    """63-bit seed from a SHA-256 hash of ``(master_seed, stage, replicate, fraction)``.

    ``fraction`` is normalized when it parses as a fraction ("2/8" and "1/4"
    give the same seed); any other label is used verbatim.
    """
    try:
        f = Fraction(str(fraction))
        label = f"{f.numerator}/{f.denominator}"
    except (ValueError, ZeroDivisionError):
        label = str(fraction)
    key = f"{int(master_seed)}|{stage}|{int(replicate)}|{label}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


def desk_geometry(grid_size: int = 65) -> ExperimentGeometry:
    """The reference detector binned down so its corner sits at ~80% of the grid radius.

    Distance, wavelength and physical detector width follow the reference
    setup (586 mm, 7.75 A, 260 pixels of 0.3 mm); pixel count and
    ``ewald_rad`` scale with the grid.
    """
    s = (grid_size // 2) / 32.0
    n = int(round(53 * s))
    n += 1 - n % 2
    return ExperimentGeometry(
        detector_distance=586.0,
        wavelength=7.75,
        pixel_size=0.3 * 260 / n,
        detector_shape=(n, n),
        ewald_radius_voxels=650.0 * 26 / 60.7 * s,
        central_stop_radius=0.0,
        polarization="x",
    )


def _clean(x):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _curve_dict(c: metrics.ShellCurve) -> dict:
    return {"q": c.q_centers, "value": c.values, "count": c.counts}


def _resolution_nm(crossing: metrics.Crossing, voxel_size: float) -> dict:
    """Both crossings as full-period resolutions in nm (``voxel_size`` in 1/A)."""
    out = {}
    for which in ("first", "last"):
        d = crossing.resolution(voxel_size, which)
        out[which] = None if d is None else d / 10.0
    out["beyond_range"] = crossing.beyond_range
    return out


class Experiment:
    """Detector, data and (for simulated data) the ground truth shared by all jobs."""

    def __init__(self, config: PipelineConfig, workers: int = 1):
        self.config = config
        sim = config.simulate
        self.grid_size = config.emc.grid_size or sim.grid_size
        self.det = self._detector(config)
        self.truth = None
        self.phantom = None
        photons = config.resolve(config.emc.in_photons_file)
        if photons is not None:
            self.frames = read_frames(photons)
            self.source = {"kind": "file", "path": str(config.emc.in_photons_file)}
        else:
            self.phantom = make_phantom(
                PhantomParams(sim.outer_radius, tuple(sim.shell_thickness), sim.gap,
                              sim.core_density, sim.shell_density, sim.gap_density, sim.bulge_radius),
                sim.grid_size)
            self.truth = make_truth(self.phantom, self.det, sim.background_fraction, sim.background_sigma)
            seed = seed_manager(config.pipeline.master_seed, "simulate")
            fl = fluence_for_photons(self.truth, self.det, sim.mean_photons)
            data = simulate_dataset(self.truth, self.det, sim.num_frames,
                                    FluenceDistribution(fl, sim.fluence_sigma), seed, workers)
            self.frames = data.frames
            self.true_quaternions = data.quaternions
            self.true_fluence = data.fluences
            self.source = {"kind": "simulated", "seed": seed, "num_frames": sim.num_frames,
                           "mean_photons_target": sim.mean_photons,
                           "background_amplitude": self.truth.background_amplitude}
        self.rotations = sample_rotations(config.emc.num_div)

    def _detector(self, config: PipelineConfig) -> DetectorModel:
        det_file = config.resolve(config.emc.in_detector_file)
        if det_file is not None:
            return read_detector(det_file)
        geom = config.geometry or desk_geometry(self.grid_size)
        mask = None
        mask_path = config.paths.get("make_detector.in_mask_file")
        if mask_path:
            mask = read_mask(config.resolve(mask_path), geom.detector_shape)
        return build_detector(geom, mask, grid_size=self.grid_size)

    @property
    def voxel_size(self) -> float:
        return self.det.voxel_size


def _emc_config(base: EmcConfig, seed: int) -> EmcConfig:
    return replace(base, seed=seed, selection="all", grid_size=base.grid_size)


def _phase_half(I: np.ndarray, exp: Experiment, seed: int, workers: int):
    cfg = replace(exp.config.phasing, seed=seed)
    avg, runs = phasing.reconstruct(I, cfg, workers)
    return avg, runs


def run_job(exp: Experiment, axis: str, value, replicate: int, workers: int = 1,
            deterministic: bool = True, out_dir: Path | None = None) -> dict:
    """One replicate at one sweep point; failures are recorded, not raised."""
    cfg = exp.config
    master = cfg.pipeline.master_seed
    fraction = str(value) if axis == "fraction" else "1"
    tag = f"{axis}={value} rep={replicate}"
    seeds = {}
    rec = {"axis": axis, "value": str(value), "replicate": replicate, "seeds": seeds}
    try:
        frames = exp.frames
        if axis == "frames":
            seeds["subset"] = seed_manager(master, "subset", replicate, value)
            frames = dilute.random_subset(frames, int(value), seeds["subset"])
        seeds["thin"] = seed_manager(master, f"thin:{axis}", replicate, value)
        frames = dilute.thin_photons(frames, parse_fraction(fraction), seeds["thin"])
        rec["num_frames"] = len(frames)
        rec["mean_photons"] = float(np.mean([f.total_photons for f in frames])) if frames else 0.0
        halves = dilute.split_odd_even(frames)

        models, emc_info = [], []
        for h, half in enumerate(halves):
            seeds[f"emc{h + 1}"] = seed_manager(master, f"emc{h + 1}:{axis}", replicate, value)
            res = run_emc(half, exp.det, exp.rotations, _emc_config(cfg.emc, seeds[f"emc{h + 1}"]),
                          workers, deterministic)
            models.append(res.model.values)
            last = res.history[-1] if res.history else None
            emc_info.append({
                "collapsed": res.collapsed,
                "ever_collapsed": res.ever_collapsed,
                "collapse_fraction": last.collapse_fraction if last else None,
                "final_rms_change": last.rms_change if last else None,
                "excluded_frames": int(res.excluded.sum()),
                "scales_mean": float(res.scales[~res.excluded].mean()) if (~res.excluded).any() else None,
            })
        rec["emc"] = emc_info
        rec["collapsed"] = any(e["collapsed"] for e in emc_info)

        q_max = exp.det.q_max
        rng_ = (2.0, q_max)
        I1 = models[0]
        if exp.truth is not None and cfg.pipeline.compare_truth:
            a0 = metrics.align_rotation(exp.truth.intensity.values, I1, rng_)
            I1 = a0.aligned
            rec["cc_truth_half1"] = _curve_dict(metrics.cc_half(exp.truth.intensity.values, I1,
                                                                max_shell=int(q_max)))
        a = metrics.align_rotation(I1, models[1], rng_)
        I2 = a.aligned
        cc = metrics.cc_half(I1, I2, max_shell=int(q_max))
        rec["cc_half"] = _curve_dict(cc)
        rec["cc_half_alignment"] = {"quaternion": a.quaternion, "cc": a.cc, "degenerate": a.degenerate}
        rec["resolution_cc_half_nm"] = _resolution_nm(metrics.threshold_crossing(cc, 0.5), exp.voxel_size)

        if cfg.phasing.repeats > 0 and cfg.phasing.voxel_number > 0:
            dens, prtfs = [], []
            for h, I in enumerate((I1, I2)):
                seeds[f"phase{h + 1}"] = seed_manager(master, f"phase{h + 1}:{axis}", replicate, value)
                avg, runs = _phase_half(np.clip(I, 0, None), exp, seeds[f"phase{h + 1}"], workers)
                dens.append(avg.density)
                if len(runs) >= 2:
                    p = metrics.prtf(avg.aligned, max_shell=int(q_max))
                    prtfs.append(_curve_dict(p))
                    rec[f"resolution_prtf_half{h + 1}_nm"] = _resolution_nm(
                        metrics.threshold_crossing(p, metrics.ONE_OVER_E), exp.voxel_size)
                rec[f"background_half{h + 1}"] = grid.radial_mean(avg.background)[: int(q_max) + 1]
                rec[f"phase_error_half{h + 1}"] = [float(r.errors[-1]) for r in runs]
                if out_dir is not None:
                    write_volume(VolumeGrid(avg.density, 1.0, ValueKind.COMPLEX),
                                 out_dir / f"density_{_slug(tag)}_half{h + 1}.vol")
            rec["prtf"] = prtfs
            d2 = phasing.align_to(dens[0], dens[1])
            f = metrics.fsc(grid.fft3(dens[0]), grid.fft3(d2), max_shell=int(q_max))
            rec["fsc_halves"] = _curve_dict(f)
            rec["resolution_fsc_halves_nm"] = _resolution_nm(metrics.threshold_crossing(f, "half_bit"),
                                                             exp.voxel_size)
            if exp.phantom is not None and cfg.pipeline.compare_truth:
                ref = exp.phantom.density.values
                on_ref = phasing.align_to(ref, dens[0])
                ft = metrics.fsc(grid.fft3(ref), grid.fft3(on_ref), max_shell=int(q_max))
                rec["fsc_truth"] = _curve_dict(ft)
                rec["resolution_fsc_truth_nm"] = _resolution_nm(metrics.threshold_crossing(ft, "half_bit"),
                                                                exp.voxel_size)
                sup = exp.phantom.support
                vals = np.abs(on_ref)[sup]
                vals = vals / vals.max() if vals.max() > 0 else vals
                rec["bimodality"] = metrics.bimodality_coefficient(vals)
        if out_dir is not None:
            for h, I in enumerate((I1, I2)):
                write_volume(VolumeGrid(np.clip(I, 0, None), exp.voxel_size, ValueKind.NONNEGATIVE),
                             out_dir / f"intensity_{_slug(tag)}_half{h + 1}.vol")
        rec["status"] = "ok"
    except Exception as exc:  # a failed stage is recorded and the sweep continues
        log.error("%s failed: %s", tag, exc)
        rec["status"] = "failed"
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.debug(traceback.format_exc())
    return rec


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s)


def _aggregate(records: list[dict], exclude_collapsed: bool) -> dict:
    """Mean and standard deviation over replicates, per sweep point."""
    out = {}
    keys = sorted({(r["axis"], r["value"]) for r in records}, key=lambda k: (k[0], float(Fraction(k[1]))))
    for axis, value in keys:
        group = [r for r in records if r["axis"] == axis and r["value"] == value and r["status"] == "ok"]
        used = [r for r in group if not (exclude_collapsed and r.get("collapsed"))]
        entry = {"replicates": len(group), "used": len(used),
                 "collapsed": sum(bool(r.get("collapsed")) for r in group)}
        for name in ("cc_half", "fsc_halves", "fsc_truth", "cc_truth_half1"):
            curves = [r[name] for r in used if name in r]
            if curves:
                n = min(len(c["value"]) for c in curves)
                vals = np.array([np.asarray(c["value"][:n], dtype=np.float64) for c in curves])
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    entry[name] = {"q": np.asarray(curves[0]["q"][:n]), "mean": np.nanmean(vals, axis=0),
                                   "std": np.nanstd(vals, axis=0)}
        for name in ("resolution_cc_half_nm", "resolution_fsc_halves_nm", "resolution_fsc_truth_nm",
                     "resolution_prtf_half1_nm"):
            vals = np.array([r[name]["first"] for r in used if name in r and r[name]["first"] is not None])
            if vals.size:
                ok = np.isfinite(vals)
                entry[name] = {"mean": float(np.mean(vals[ok])) if ok.any() else None,
                               "std": float(np.std(vals[ok])) if ok.any() else None,
                               "n": int(ok.sum()), "unresolved": int((~ok).sum())}
        bim = [r["bimodality"] for r in used if "bimodality" in r]
        if bim:
            entry["bimodality"] = {"mean": float(np.mean(bim)), "std": float(np.std(bim))}
        mp = [r["mean_photons"] for r in group if "mean_photons" in r]
        if mp:
            entry["mean_photons"] = float(np.mean(mp))
        out[f"{axis}={value}"] = entry
    return out


def run_pipeline(config: PipelineConfig, workers: int | None = None, deterministic: bool | None = None,
                 out_dir=None) -> dict:
    """Run every (sweep point, replicate) job and return the report as a dict."""
    pc = config.pipeline
    workers = pc.workers if workers is None else workers
    deterministic = pc.deterministic if deterministic is None else deterministic
    workers = max(1, int(workers))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    exp = Experiment(config, workers)
    jobs = [("fraction", f, rep) for f in pc.fractions for rep in range(pc.replicates)]
    jobs += [("frames", n, rep) for n in pc.frame_counts for rep in range(pc.replicates)]
    if not jobs:
        raise StageError("nothing to run: no fractions or frame counts")
    for axis, value, _ in jobs:
        if axis == "frames" and int(value) > len(exp.frames):
            raise StageError(f"frame count {value} exceeds the {len(exp.frames)} available frames")

    outer = min(workers, len(jobs))
    inner = max(1, workers // outer)

    def one(job):
        return run_job(exp, *job, workers=inner, deterministic=deterministic, out_dir=out_dir)

    if outer > 1:
        with ThreadPoolExecutor(outer) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(j) for j in jobs]

    report = {
        "version": REPORT_VERSION,
        "master_seed": pc.master_seed,
        "deterministic": deterministic,
        "source": exp.source,
        "detector": {"num_pixels": exp.det.num_pixels, "q_max_voxels": exp.det.q_max,
                     "voxel_size_inv_angstrom": exp.voxel_size,
                     "mask_counts": np.bincount(exp.det.mask_class, minlength=3)},
        "grid_size": exp.grid_size,
        "rotations": len(exp.rotations),
        "emc": {"num_div": config.emc.num_div, "num_iter": config.emc.num_iter,
                "beta": config.emc.beta, "beta_schedule": [config.emc.beta_factor, config.emc.beta_interval],
                "need_scaling": config.emc.need_scaling},
        "phasing": {"repeats": config.phasing.repeats, "iters": config.phasing.iters,
                    "voxel_number": config.phasing.voxel_number, "background": config.phasing.background,
                    "inner_mask": config.phasing.inner_mask, "outer_mask": config.phasing.outer_mask},
        "exclude_collapsed": pc.exclude_collapsed,
        "jobs": records,
        "aggregate": _aggregate(records, pc.exclude_collapsed),
        "failures": sum(r["status"] != "ok" for r in records),
    }
    return _clean(report)


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, allow_nan=False) + "\n"
