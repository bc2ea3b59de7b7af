"""INI configuration in the layout of the Dragonfly and 3D-Phasing config files.

Sections::

    [parameters]          detector geometry (detd, lambda, detsize, pixsize, ...)
    [make_detector]       mask / detector file paths
    [emc]                 orientation determination and merging
    [simulate]            phantom and synthetic data
    [input]               phasing masks (inner_mask, outer_mask)
    [phasing]             repeats, iteration plan
    [phasing_parameters]  voxel_number, background
    [pipeline]            dilution sweep driver

A value of the form ``section:::key`` refers to another entry.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from spi.errors import ConfigurationError
from spi.geometry import ExperimentGeometry

ALGORITHMS = {"ER": "ER", "ERA": "ER", "DM": "DM"}
_ITER_TOKEN = re.compile(r"^(\d+)([A-Za-z]+)$")


def parse_iteration_string(s: str) -> list[tuple[str, int]]:
    """``"100ERA 200DM 200ERA"`` -> ``[("ER", 100), ("DM", 200), ("ER", 200)]``."""
    plan = []
    for token in s.replace(",", " ").split():
        m = _ITER_TOKEN.match(token)
        if not m:
            raise ConfigurationError(f"bad iteration token {token!r}")
        count, name = int(m.group(1)), m.group(2).upper()
        if count < 1:
            raise ConfigurationError(f"iteration count must be positive in {token!r}")
        if name not in ALGORITHMS:
            raise ConfigurationError(f"unknown phasing algorithm {m.group(2)!r}")
        plan.append((ALGORITHMS[name], count))
    if not plan:
        raise ConfigurationError("empty iteration plan")
    return plan


def format_iteration_plan(plan) -> str:
    return " ".join(f"{n}{'ERA' if algo == 'ER' else algo}" for algo, n in plan)


def parse_fraction(s) -> Fraction:
    """``"1/256"`` -> ``Fraction(1, 256)``; must lie in [0, 1]."""
    try:
        f = Fraction(str(s).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"bad fraction {s!r}") from exc
    if not 0 <= f <= 1:
        raise ConfigurationError(f"fraction {s!r} outside [0, 1]")
    return f


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", "none", ""):
        return False
    raise ConfigurationError(f"bad boolean {s!r}")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


@dataclass
class EmcConfig:
    num_div: int = 10
    num_iter: int = 100
    beta: float = 0.001
    beta_factor: float = 1.41421356
    beta_interval: int = 10
    need_scaling: bool = True
    selection: str = "all"
    seed: int = 0
    prob_floor: float = 1e-10
    interpolation: str = "trilinear"
    grid_size: int | None = None
    in_photons_file: str | None = None
    in_detector_file: str | None = None
    output_folder: str = "data/"
    log_file: str = "EMC.log"

    def __post_init__(self):
        if self.num_div < 1:
            raise ConfigurationError("num_div must be >= 1")
        if not 0 < self.beta <= 1:
            raise ConfigurationError("beta must lie in (0, 1]")
        if self.beta_factor < 1 or self.beta_interval < 1:
            raise ConfigurationError("beta_schedule needs factor >= 1 and interval >= 1")
        if self.selection not in ("all", "odd_only", "even_only"):
            raise ConfigurationError(f"unknown selection {self.selection!r}")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")
        if self.num_iter < 0:
            raise ConfigurationError("num_iter must be >= 0")

    def beta_at(self, iteration: int) -> float:
        """Annealing exponent for a zero-based iteration number."""
        return min(1.0, self.beta * self.beta_factor ** (iteration // self.beta_interval))


@dataclass
class PhasingConfig:
    repeats: int = 400
    iters: str = "100ERA 200DM 200ERA"
    dm_beta: float = 0.7
    voxel_number: int = 2000
    background: bool = True
    inner_mask: float = 6
    outer_mask: float | None = None
    init_background_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.plan = parse_iteration_string(self.iters)
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.voxel_number < 1:
            raise ConfigurationError("voxel_number must be positive")
        if not 0 < self.dm_beta:
            raise ConfigurationError("DM beta must be positive")


@dataclass
class SimulateConfig:
    grid_size: int = 65
    outer_radius: float = 8.0
    shell_thickness: tuple[float, float] = (1.5, 1.5)
    gap: float = 1.5
    core_density: float = 0.6
    shell_density: float = 1.0
    gap_density: float = 0.4
    bulge_radius: float = 0.0
    background_fraction: float = 0.0
    background_sigma: float = 12.0
    num_frames: int = 1000
    mean_photons: float = 2000.0
    fluence_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.grid_size % 2 == 0:
            raise ConfigurationError("grid_size must be odd")
        if not 0 <= self.background_fraction < 1:
            raise ConfigurationError("background_fraction must lie in [0, 1)")
        if self.mean_photons <= 0:
            raise ConfigurationError("mean_photons must be positive")


@dataclass
class PipelineSection:
    fractions: list[str] = field(default_factory=lambda: ["1"])
    frame_counts: list[int] = field(default_factory=list)
    replicates: int = 1
    master_seed: int = 0
    workers: int = 1
    deterministic: bool = True
    exclude_collapsed: bool = False
    compare_truth: bool = True

    def __post_init__(self):
        for f in self.fractions:
            parse_fraction(f)
        if self.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")


@dataclass
class PipelineConfig:
    geometry: ExperimentGeometry | None = None
    emc: EmcConfig = field(default_factory=EmcConfig)
    phasing: PhasingConfig = field(default_factory=PhasingConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    paths: dict[str, str] = field(default_factory=dict)
    source: Path | None = None

    def resolve(self, path: str | None) -> Path | None:
        """Interpret a config path relative to the config file."""
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p


def _strip(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "'\"":
        v = v[1:-1]
    return v


def read_ini(text: str) -> dict[str, dict[str, str]]:
    """Parse INI text into nested dicts, resolving ``section:::key`` references."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = lambda k: k.replace("\\_", "_").strip().lower()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from exc
    raw = {s: {k: _strip(v) for k, v in parser.items(s)} for s in parser.sections()}
    for sec in raw.values():
        for k, v in sec.items():
            if ":::" in v:
                ref_sec, ref_key = v.split(":::", 1)
                try:
                    sec[k] = raw[ref_sec.strip()][ref_key.strip().lower()]
                except KeyError as exc:
                    raise ConfigurationError(f"unresolved reference {v!r}") from exc
    return raw


def _geometry(sec: dict[str, str]) -> ExperimentGeometry:
    try:
        shape = [int(float(x)) for x in sec["detsize"].split()]
        if len(shape) == 1:
            shape = shape * 2
        return ExperimentGeometry(
            detector_distance=float(sec["detd"]),
            wavelength=float(sec["lambda"]),
            pixel_size=float(sec["pixsize"]),
            detector_shape=tuple(shape),
            ewald_radius_voxels=float(sec["ewald_rad"]),
            central_stop_radius=float(sec.get("stoprad", 0)),
            polarization=sec.get("polarization", "x").strip().lower() or "none",
        )
    except KeyError as exc:
        raise ConfigurationError(f"[parameters] missing {exc.args[0]}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"[parameters] {exc}") from exc


def _emc(sec: dict[str, str]) -> EmcConfig:
    kw = {}
    conv = {"num_div": int, "num_iter": int, "beta": float, "seed": int,
            "prob_floor": float, "grid_size": int}
    for k, fn in conv.items():
        if k in sec:
            kw[k] = fn(float(sec[k])) if fn is int else fn(sec[k])
    if "need_scaling" in sec:
        kw["need_scaling"] = _bool(sec["need_scaling"])
    if "beta_schedule" in sec:
        vals = _floats(sec["beta_schedule"])
        if len(vals) != 2:
            raise ConfigurationError("beta_schedule needs '<factor> <interval>'")
        kw["beta_factor"], kw["beta_interval"] = vals[0], int(vals[1])
    for k in ("selection", "interpolation", "output_folder", "log_file", "in_detector_file"):
        if k in sec:
            kw[k] = sec[k]
    for k in ("in_photons_file", "in_photons_list"):
        if k in sec:
            kw["in_photons_file"] = sec[k]
    return EmcConfig(**kw)


def _phasing(sec_in, sec_ph, sec_par) -> PhasingConfig:
    kw = {}
    if "repeats" in sec_ph:
        kw["repeats"] = int(sec_ph["repeats"])
    if "iters" in sec_ph:
        kw["iters"] = sec_ph["iters"]
    for k in ("dm_beta", "beta"):
        if k in sec_ph:
            kw["dm_beta"] = float(sec_ph[k])
    if "seed" in sec_ph:
        kw["seed"] = int(sec_ph["seed"])
    if "voxel_number" in sec_par:
        kw["voxel_number"] = int(float(sec_par["voxel_number"]))
    if "background" in sec_par:
        kw["background"] = _bool(sec_par["background"])
    if "init_background_scale" in sec_par:
        kw["init_background_scale"] = float(sec_par["init_background_scale"])
    if "inner_mask" in sec_in and sec_in["inner_mask"].lower() != "none":
        kw["inner_mask"] = float(sec_in["inner_mask"])
    if "outer_mask" in sec_in and sec_in["outer_mask"].lower() != "none":
        kw["outer_mask"] = float(sec_in["outer_mask"])
    return PhasingConfig(**kw)


def _simulate(sec) -> SimulateConfig:
    kw = {}
    types = {f.name: f.type for f in fields(SimulateConfig)}
    for k, v in sec.items():
        if k not in types:
            continue
        t = types[k]
        if k == "shell_thickness":
            vals = _floats(v)
            kw[k] = (vals[0], vals[-1]) if vals else (0.0, 0.0)
        elif t in ("int", int):
            kw[k] = int(float(v))
        else:
            kw[k] = float(v)
    return SimulateConfig(**kw)


def _pipeline(sec) -> PipelineSection:
    kw = {}
    if "fractions" in sec:
        kw["fractions"] = sec["fractions"].replace(",", " ").split()
    if "frame_counts" in sec:
        kw["frame_counts"] = [int(x) for x in sec["frame_counts"].replace(",", " ").split()]
    for k in ("replicates", "master_seed", "workers"):
        if k in sec:
            kw[k] = int(sec[k])
    for k in ("deterministic", "exclude_collapsed", "compare_truth"):
        if k in sec:
            kw[k] = _bool(sec[k])
    return PipelineSection(**kw)


def parse_config(text: str, source: Path | None = None) -> PipelineConfig:
    raw = read_ini(text)
    try:
        cfg = PipelineConfig(
            geometry=_geometry(raw["parameters"]) if "parameters" in raw else None,
            emc=_emc(raw.get("emc", {})),
            phasing=_phasing(raw.get("input", {}), raw.get("phasing", {}),
                             raw.get("phasing_parameters", {})),
            simulate=_simulate(raw.get("simulate", {})),
            pipeline=_pipeline(raw.get("pipeline", {})),
            source=source,
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc
    paths = {}
    for sec in ("make_detector", "output", "paths"):
        for k, v in raw.get(sec, {}).items():
            paths[f"{sec}.{k}"] = v
    cfg.paths = paths
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)


def dump_config(cfg: PipelineConfig) -> str:
    """Serialize back to INI text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    out = []
    g = cfg.geometry
    if g is not None:
        out += ["[parameters]",
                f"detd = {g.detector_distance!r}",
                f"lambda = {g.wavelength!r}",
                f"detsize = {g.detector_shape[0]} {g.detector_shape[1]}",
                f"pixsize = {g.pixel_size!r}",
                f"stoprad = {g.central_stop_radius!r}",
                f"ewald_rad = {g.ewald_radius_voxels!r}",
                f"polarization = {g.polarization}", ""]
    e = cfg.emc
    out += ["[emc]", f"num_div = {e.num_div}", f"num_iter = {e.num_iter}",
            f"beta = {e.beta!r}", f"beta_schedule = {e.beta_factor!r} {e.beta_interval}",
            f"need_scaling = {int(e.need_scaling)}", f"selection = {e.selection}",
            f"seed = {e.seed}", f"prob_floor = {e.prob_floor!r}",
            f"interpolation = {e.interpolation}",
            f"output_folder = {e.output_folder}", f"log_file = {e.log_file}"]
    if e.grid_size is not None:
        out.append(f"grid_size = {e.grid_size}")
    if e.in_photons_file:
        out.append(f"in_photons_file = {e.in_photons_file}")
    if e.in_detector_file:
        out.append(f"in_detector_file = {e.in_detector_file}")
    p = cfg.phasing
    out += ["", "[input]", f"inner_mask = {p.inner_mask!r}",
            f"outer_mask = {p.outer_mask!r}" if p.outer_mask is not None else "outer_mask = None",
            "", "[phasing]", f"repeats = {p.repeats}", f"iters = {p.iters}",
            f"dm_beta = {p.dm_beta!r}", f"seed = {p.seed}",
            "", "[phasing_parameters]", f"voxel_number = {p.voxel_number}",
            f"background = {p.background}",
            f"init_background_scale = {p.init_background_scale!r}"]
    s = cfg.simulate
    out += ["", "[simulate]"]
    for f in fields(SimulateConfig):
        v = getattr(s, f.name)
        if f.name == "shell_thickness":
            v = f"{v[0]!r} {v[1]!r}"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    pl = cfg.pipeline
    out += ["", "[pipeline]", f"fractions = {' '.join(pl.fractions)}",
            f"frame_counts = {' '.join(str(n) for n in pl.frame_counts)}",
            f"replicates = {pl.replicates}", f"master_seed = {pl.master_seed}",
            f"workers = {pl.workers}", f"deterministic = {pl.deterministic}",
            f"exclude_collapsed = {pl.exclude_collapsed}",
            f"compare_truth = {pl.compare_truth}"]
    groups: dict[str, list[str]] = {}
    for key, v in cfg.paths.items():
        sec, k = key.split(".", 1)
        groups.setdefault(sec, []).append(f"{k} = {v}")
    for sec, lines in groups.items():
        out += ["", f"[{sec}]"] + lines
    return "\n".join(out) + "\n"
