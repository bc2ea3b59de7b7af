"""Command-line entry point ``spi``.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from spi import __version__, dilute, grid, metrics, phasing
from spi.config import PipelineConfig, load_config, parse_fraction
from spi.dataio import (ValueKind, VolumeGrid, read_photon_file, read_volume, write_frames,
                        write_quaternion_log, write_volume)
from spi.emc import run_emc, write_log_header
from spi.errors import ConfigurationError, FormatError, StageError
from spi.geometry import read_detector, write_detector

log = logging.getLogger("spi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.pipeline.master_seed = args.seed
        cfg.emc.seed = args.seed
        cfg.phasing.seed = args.seed
        cfg.simulate.seed = args.seed
    return cfg


def _write_table(text: str, path) -> None:
    if path in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


def _frames_in(path):
    pf = read_photon_file(path)
    return pf.frames, pf.num_pixels, pf.metadata


def cmd_sim(args) -> int:
    from spi.pipeline import Experiment

    cfg = _config(args)
    if args.frames is not None:
        cfg.simulate.num_frames = args.frames
    if args.photons is not None:
        cfg.simulate.mean_photons = args.photons
    cfg.emc.in_photons_file = None
    if cfg.simulate.seed and args.seed is None:
        cfg.pipeline.master_seed = cfg.simulate.seed
    exp = Experiment(cfg, args.workers)
    meta = {"kind": "simulated", "seed": exp.source["seed"], "master_seed": cfg.pipeline.master_seed,
            "mean_photons_target": cfg.simulate.mean_photons}
    write_frames(exp.frames, args.output, exp.det.num_pixels, meta)
    out = Path(args.output)
    quat_path = Path(args.quat) if args.quat else out.with_suffix(".quat")
    write_quaternion_log(quat_path, exp.true_quaternions, exp.true_fluence, header="w x y z fluence")
    if args.detector:
        write_detector(exp.det, args.detector)
    if args.truth:
        write_volume(VolumeGrid(exp.truth.intensity.values, exp.det.voxel_size, ValueKind.NONNEGATIVE),
                     args.truth)
    if args.density:
        write_volume(exp.phantom.density, args.density)
    mean = np.mean([f.total_photons for f in exp.frames]) if exp.frames else 0.0
    print(f"wrote {len(exp.frames)} frames ({mean:.1f} photons/frame) to {args.output}")
    return EXIT_OK


def cmd_dilute(args) -> int:
    frames, npix, meta = _frames_in(args.input)
    p = parse_fraction(args.fraction)
    out = dilute.thin_photons(frames, p, args.seed or 0)
    meta = dict(meta, thinned={"fraction": str(p), "seed": args.seed or 0, "source": str(args.input)})
    write_frames(out, args.output, npix, meta)
    mean = np.mean([f.total_photons for f in out]) if out else 0.0
    print(f"kept fraction {p}: {mean:.2f} photons/frame")
    return EXIT_OK


def cmd_split(args) -> int:
    frames, npix, meta = _frames_in(args.input)
    odd, even = dilute.split_odd_even(frames)
    stem = Path(args.output_prefix)
    write_frames(odd, f"{stem}_odd.phot", npix, dict(meta, split="odd"))
    write_frames(even, f"{stem}_even.phot", npix, dict(meta, split="even"))
    print(f"{len(odd)} odd, {len(even)} even frames")
    return EXIT_OK


def cmd_subset(args) -> int:
    frames, npix, meta = _frames_in(args.input)
    out = dilute.random_subset(frames, args.n, args.seed or 0)
    write_frames(out, args.output, npix, dict(meta, subset={"n": args.n, "seed": args.seed or 0}))
    print(f"wrote {len(out)} frames")
    return EXIT_OK


def cmd_emc(args) -> int:
    from spi.pipeline import Experiment

    cfg = _config(args)
    if args.photons:
        cfg.emc.in_photons_file = str(Path(args.photons).resolve())
    if args.detector:
        cfg.emc.in_detector_file = str(Path(args.detector).resolve())
    if args.iterations is not None:
        cfg.emc.num_iter = args.iterations
    if cfg.emc.in_photons_file is None:
        raise ConfigurationError("no photon file: set [emc] in_photons_file or pass --photons")
    if args.detector is None and cfg.emc.in_detector_file is None and cfg.geometry is None:
        raise ConfigurationError("no detector: set [parameters], [emc] in_detector_file or --detector")
    exp = Experiment(cfg, args.workers)
    out_dir = Path(args.output).parent
    log_path = Path(args.log) if args.log else out_dir / cfg.emc.log_file
    write_log_header(log_path, cfg.emc, len(exp.frames), len(exp.rotations))
    res = run_emc(exp.frames, exp.det, exp.rotations, cfg.emc, args.workers, args.deterministic,
                  log_path=log_path)
    write_volume(res.model, args.output)
    np.savetxt(Path(args.output).with_suffix(".scales"), np.column_stack([res.frame_ids, res.scales]),
               fmt=["%d", "%.10g"], header="frame_id scale")
    flag = "  ORIENTATION COLLAPSE" if res.collapsed else ""
    print(f"{len(res.history)} iterations, {len(exp.rotations)} rotations{flag}")
    return EXIT_OK


def cmd_phase(args) -> int:
    cfg = _config(args)
    p = cfg.phasing
    if args.repeats is not None:
        p = replace(p, repeats=args.repeats)
    if args.iters is not None:
        p = replace(p, iters=args.iters)
    vol = read_volume(args.input)
    avg, runs = phasing.reconstruct(np.clip(vol.values.real, 0, None), p, args.workers)
    write_volume(VolumeGrid(avg.density, 1.0, ValueKind.COMPLEX), args.output)
    out = Path(args.output)
    shells, prof = avg.background_profile()
    np.savetxt(out.with_suffix(".background"), np.column_stack([shells, prof, prof ** 2]),
               fmt="%.10g", header="shell B B^2")
    errs = np.array([r.errors for r in runs])
    np.savetxt(out.with_suffix(".errors"), errs.T, fmt="%.8g", header="iteration x repeat")
    if args.stack:
        stack = Path(args.stack)
        stack.mkdir(parents=True, exist_ok=True)
        for i, a in enumerate(avg.aligned):
            write_volume(VolumeGrid(a, 1.0, ValueKind.COMPLEX), stack / f"solution_{i:04d}.vol")
    print(f"{len(runs)} repeats, final error median {np.median(errs[:, -1]):.4g}")
    return EXIT_OK


def _summary(name, curve, kind, voxel_size):
    c = metrics.threshold_crossing(curve, kind)
    lines = []
    for which in ("first", "last"):
        d = c.resolution(voxel_size, which)
        if d is None:
            val = "beyond range"
        elif not np.isfinite(d):
            val = "below threshold at every q > 0"
        else:
            val = f"{d / 10.0:.4g} nm" if voxel_size != 1.0 else f"{d:.4g}"
        lines.append(f"# {name} {which} crossing: {val}")
    return "\n".join(lines)


def cmd_metrics(args) -> int:
    out = args.output
    if args.kind == "powder":
        frames, npix, _ = _frames_in(args.inputs[0])
        det = read_detector(args.detector) if args.detector else None
        shape = det.detector_shape if det is not None else None
        img = metrics.powder_sum(frames, npix, shape)
        if out in (None, "-"):
            np.savetxt(sys.stdout, np.atleast_2d(img), fmt="%.10g")
        else:
            np.savetxt(out, np.atleast_2d(img), fmt="%.10g")
        return EXIT_OK
    vols = [read_volume(p) for p in args.inputs]
    voxel_size = args.voxel_size or 1.0
    if args.kind == "cc":
        if len(vols) != 2:
            raise ConfigurationError("cc needs two intensity volumes")
        I1, I2 = vols[0].values.real, vols[1].values.real
        voxel_size = args.voxel_size or vols[0].voxel_size
        if args.align:
            I2 = metrics.align_rotation(I1, I2).aligned
        curve = metrics.cc_half(I1, I2, max_shell=args.max_shell)
        text = curve.table() + "\n" + _summary("CC1/2=0.5", curve, 0.5, voxel_size)
    elif args.kind == "fsc":
        if len(vols) != 2:
            raise ConfigurationError("fsc needs two density volumes")
        a = vols[0].values
        b = phasing.align_to(a, vols[1].values)
        curve = metrics.fsc(grid.fft3(a), grid.fft3(b), max_shell=args.max_shell)
        text = curve.table() + "\n" + _summary("FSC half-bit", curve, "half_bit", voxel_size)
    else:
        if len(vols) < 2:
            raise ConfigurationError("prtf needs at least two aligned solutions")
        curve = metrics.prtf([v.values for v in vols], max_shell=args.max_shell)
        text = curve.table() + "\n" + _summary("PRTF 1/e", curve, metrics.ONE_OVER_E, voxel_size)
    _write_table(text, out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from spi.pipeline import dumps_report, run_pipeline

    cfg = _config(args)
    report = run_pipeline(cfg, args.workers, args.deterministic, args.out_dir)
    text = dumps_report(report)
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    if report["failures"]:
        log.error("%d job(s) failed", report["failures"])
        return EXIT_STAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--workers", type=int, default=1, help="worker threads")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=True,
                     help="ordered reductions, output independent of --workers (default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="spi", description="Single-particle imaging reconstruction toolkit")
    ap.add_argument("--version", action="version", version=f"spi {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", parents=[common], help="simulate sparse frames from a phantom")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--output", required=True, help=".phot output")
    p.add_argument("--frames", type=int)
    p.add_argument("--photons", type=float, help="mean photons per frame")
    p.add_argument("--quat", help="hidden orientation log (default: <output>.quat)")
    p.add_argument("--detector", help="also write the detector file")
    p.add_argument("--truth", help="also write the ground-truth intensity .vol")
    p.add_argument("--density", help="also write the phantom density .vol")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("dilute", parents=[common], help="Bernoulli photon thinning")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--fraction", required=True, help='keep probability, e.g. "1/256"')
    p.set_defaults(func=cmd_dilute)

    p = sub.add_parser("split", parents=[common], help="odd/even split by position")
    p.add_argument("input")
    p.add_argument("-o", "--output-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("subset", parents=[common], help="random frame subset")
    p.add_argument("input")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("emc", parents=[common], help="orientation determination and merging")
    p.add_argument("-c", "--config")
    p.add_argument("--photons", help=".phot input (overrides the config)")
    p.add_argument("--detector", help="detector file (overrides the config)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--log", help="iteration log (default: <output dir>/<log_file>)")
    p.add_argument("-o", "--output", required=True, help="merged intensity .vol")
    p.set_defaults(func=cmd_emc)

    p = sub.add_parser("phase", parents=[common], help="background-aware phase retrieval")
    p.add_argument("-c", "--config")
    p.add_argument("-i", "--input", required=True, help="intensity .vol")
    p.add_argument("-o", "--output", required=True, help="averaged density .vol")
    p.add_argument("--repeats", type=int)
    p.add_argument("--iters", help='iteration plan, e.g. "100ERA 200DM 200ERA"')
    p.add_argument("--stack", help="directory for the aligned solutions")
    p.set_defaults(func=cmd_phase)

    p = sub.add_parser("metrics", parents=[common], help="CC1/2, FSC, PRTF tables and powder sums")
    p.add_argument("kind", choices=["cc", "fsc", "prtf", "powder"])
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", help="table output (default stdout)")
    p.add_argument("--align", action="store_true", help="rotationally align the second intensity")
    p.add_argument("--max-shell", type=int)
    p.add_argument("--voxel-size", type=float, help="voxel size in 1/A for resolutions in nm")
    p.add_argument("--detector", help="detector file, to shape powder sums")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pipeline", parents=[common], help="full dilution / frame-count sweep")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", help="report JSON (default stdout)")
    p.add_argument("--out-dir", help="directory for intermediate volumes")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, FileNotFoundError) as exc:
        print(f"spi: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, ValueError, RuntimeError) as exc:
        print(f"spi: stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
