"""
Run Configuration
Typed configuration sections read from `section.key=value` files (dotenv format) plus --set overrides
"""

import difflib
import hashlib
import os
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Tuple

import numpy as np
from dotenv import dotenv_values

from .errors import ConfigError
from .mapping import ground_class_names


@dataclass(frozen=True)
class GridSection:
    extent_min: Tuple[float, ...] = (-10.0, -10.0, -1.0)
    extent_max: Tuple[float, ...] = (10.0, 10.0, 5.0)
    delta: float = 0.32
    feature_dims: Tuple[int, ...] = (256, 256, 128)
    init_std: float = 0.01


@dataclass(frozen=True)
class SamplingSection:
    voxel_edge: float = 0.2
    max_per_voxel: int = 10
    decay_scale: float = 0.25
    consistency_count: int = 2500
    max_targets: int = 50000
    support_subset: bool = True


@dataclass(frozen=True)
class TrainingSection:
    seed: int = 0
    steps: int = 20000
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 2000
    decay_steps: int = 40000
    decay_rate: float = 0.5
    lambda_s: float = 7.5
    lambda_g: float = 2.0
    lambda_c: float = 1.0
    loss_reduction: str = "mean"
    bn_momentum: float = 0.99
    checkpoint_every: int = 5000
    log_every: int = 10
    resample_every: int = 1000


@dataclass(frozen=True)
class ExtractionSection:
    theta_empty: float = 0.04
    theta_free: float = 0.3
    voxel_edge: float = 0.2
    mise_cells_per_coarsest: int = 16
    mise_levels: int = 2
    refine_iters: int = 3
    refine_step: float = 1.0
    ground_cell: float = 0.2
    ground_classes: Tuple[str, ...] = tuple(ground_class_names)
    pr_thetas: Tuple[float, ...] = (0.005, 0.01, 0.02, 0.04, 0.08, 0.15, 0.3, 0.5, 0.7, 0.9)
    ignore_unseen: bool = True


@dataclass(frozen=True)
class SynthSection:
    n_boxes: int = 5
    n_cylinders: int = 3
    n_strips: int = 1
    n_scans: int = 1
    scan_spacing: float = 4.0
    sensor_height: float = 1.73
    azimuth_count: int = 720
    elevation_count: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 3.0
    max_range: float = 100.0


@dataclass(frozen=True)
class IOSection:
    class_map: str = ""
    scan_paths: Tuple[str, ...] = ()
    label_paths: Tuple[str, ...] = ()
    poses_path: str = ""


@dataclass(frozen=True)
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    synth: SynthSection = field(default_factory=SynthSection)
    io: IOSection = field(default_factory=IOSection)

    def to_flat(self) -> Dict[str, str]:
        """Resolved `section.key -> text` in declaration order"""
        flat = {}
        for section in fields(self):
            values = getattr(self, section.name)
            for f in fields(values):
                flat[f"{section.name}.{f.name}"] = format_value(getattr(values, f.name))
        return flat

    def get(self, key: str):
        section, name = key.split(".", 1)
        return getattr(getattr(self, section), name)

    def with_values(self, values: Dict[str, object]) -> "RunConfig":
        """Copy with already-typed values replaced"""
        per_section: Dict[str, Dict[str, object]] = {}
        for key, value in values.items():
            section, name = key.split(".", 1)
            per_section.setdefault(section, {})[name] = value
        return replace(self, **{s: replace(getattr(self, s), **v) for s, v in per_section.items()})


# ------------------------------------------------------------------------------------------------------------------------------ #
# Reference hyperparameters checked by validate_config (deviations are warnings)
REFERENCE_DEFAULTS = {
    "grid.delta": 0.32,
    "training.base_lr": 1e-3,
    "training.beta1": 0.9,
    "training.beta2": 0.999,
    "training.warmup_steps": 2000,
    "training.decay_steps": 40000,
    "training.decay_rate": 0.5,
    "training.lambda_s": 7.5,
    "training.lambda_g": 2.0,
    "training.lambda_c": 1.0,
    "extraction.theta_empty": 0.04,
    "extraction.theta_free": 0.3,
    "sampling.max_per_voxel": 10,
    "sampling.consistency_count": 2500,
}

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, text: str, default):
    text = "" if text is None else str(text).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(f"expected true/false, got '{text}'")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            element = type(default[0]) if default else str
            return tuple(element(item) for item in items)
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse '{text}' ({e})") from None


def _nearest_key(key: str, valid: Iterable[str]) -> str:
    matches = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.0)
    return matches[0] if matches else ""


def parse_assignments(pairs: Iterable[Tuple[str, str]], base: RunConfig = None) -> RunConfig:
    base = base or RunConfig()
    valid = base.to_flat()
    values = {}
    for key, text in pairs:
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"unknown configuration key '{key}' (nearest valid key: '{_nearest_key(key, valid)}')",
                              problems=[(key, "unknown key")])
        values[key] = _coerce(key, text, base.get(key))
    return base.with_values(values)


def load_config(path: str = None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    Defaults, then the file, then `key=value` overrides (later wins)

    Only parsing errors raise here; invariants are checked by validate_config.
    """
    pairs: List[Tuple[str, str]] = []
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"configuration file not found: {path}")
        pairs.extend(dotenv_values(path, interpolate=False).items())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        key, text = item.split("=", 1)
        pairs.append((key, text))
    return parse_assignments(pairs)


def config_text(config: RunConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in config.to_flat().items())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config_text(config).encode("utf-8")).hexdigest()


def stream_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Named, reproducible sub-stream of the run seed"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, keys)]))


# ======================================================= #
# Validation
# ======================================================= #
@dataclass
class ValidationReport:
    errors: List[Tuple[str, str]] = field(default_factory=list)
    warnings: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> List[str]:
        out = [f"✗ {key}: {msg}" for key, msg in self.errors]
        out += [f"! {key}: {msg}" for key, msg in self.warnings]
        return out


def validate_config(config) -> ValidationReport:
    """Check every RunConfig invariant; deviations from the reference hyperparameters become warnings"""
    if not isinstance(config, RunConfig):
        config = load_config(config)
    report = ValidationReport()

    def require(key, condition, message):
        if not condition:
            report.errors.append((key, message))

    g, s, t, e, y = config.grid, config.sampling, config.training, config.extraction, config.synth

    require("grid.delta", g.delta > 0, f"must be > 0 (got {g.delta})")
    require("grid.extent_min", len(g.extent_min) == 3, "needs three values")
    require("grid.extent_max", len(g.extent_max) == 3, "needs three values")
    if len(g.extent_min) == 3 and len(g.extent_max) == 3:
        require("grid.extent_max", all(a < b for a, b in zip(g.extent_min, g.extent_max)),
                "every component must exceed grid.extent_min")
    require("grid.feature_dims", len(g.feature_dims) == 3 and all(d > 0 for d in g.feature_dims),
            "needs three positive dimensions")
    require("grid.init_std", g.init_std >= 0, "must be >= 0")

    require("sampling.voxel_edge", s.voxel_edge > 0, "must be > 0")
    require("sampling.max_per_voxel", s.max_per_voxel >= 1, "must be >= 1")
    require("sampling.decay_scale", s.decay_scale > 0, "must be > 0")
    require("sampling.consistency_count", s.consistency_count >= 0, "must be >= 0")
    require("sampling.max_targets", s.max_targets >= 1, "must be >= 1")

    require("training.steps", t.steps >= 0, "must be >= 0")
    require("training.base_lr", t.base_lr > 0, "must be > 0")
    require("training.beta1", 0 <= t.beta1 < 1, "must be in [0, 1)")
    require("training.beta2", 0 <= t.beta2 < 1, "must be in [0, 1)")
    require("training.adam_eps", t.adam_eps > 0, "must be > 0")
    require("training.warmup_steps", t.warmup_steps >= 0, "must be >= 0")
    require("training.decay_steps", t.decay_steps >= 1, "must be >= 1")
    require("training.decay_rate", 0 < t.decay_rate <= 1, "must be in (0, 1]")
    for name in ("lambda_s", "lambda_g", "lambda_c"):
        require(f"training.{name}", getattr(t, name) >= 0, "must be >= 0")
    require("training.loss_reduction", t.loss_reduction in ("mean", "sum"), "must be 'mean' or 'sum'")
    require("training.bn_momentum", 0 <= t.bn_momentum < 1, "must be in [0, 1)")
    require("training.checkpoint_every", t.checkpoint_every >= 0, "must be >= 0")
    require("training.log_every", t.log_every >= 1, "must be >= 1")
    require("training.resample_every", t.resample_every >= 0, "must be >= 0")

    require("extraction.theta_empty", 0 < e.theta_empty < 1, "must be in (0, 1)")
    require("extraction.theta_free", 0 < e.theta_free < 1, "must be in (0, 1)")
    require("extraction.voxel_edge", e.voxel_edge > 0, "must be > 0")
    require("extraction.mise_cells_per_coarsest", e.mise_cells_per_coarsest >= 1, "must be >= 1")
    require("extraction.mise_levels", e.mise_levels >= 0, "must be >= 0")
    require("extraction.refine_iters", e.refine_iters >= 0, "must be >= 0")
    require("extraction.refine_step", e.refine_step >= 0, "must be >= 0")
    require("extraction.ground_cell", e.ground_cell > 0, "must be > 0")
    require("extraction.ground_classes", len(e.ground_classes) >= 1, "needs at least one class")
    require("extraction.pr_thetas", all(0 < v < 1 for v in e.pr_thetas), "values must be in (0, 1)")
    require("extraction.pr_thetas", list(e.pr_thetas) == sorted(set(e.pr_thetas)), "must be strictly ascending")

    for name in ("n_boxes", "n_cylinders", "n_strips"):
        require(f"synth.{name}", getattr(y, name) >= 0, "must be >= 0")
    require("synth.n_scans", y.n_scans >= 1, "must be >= 1")
    require("synth.azimuth_count", y.azimuth_count >= 1, "must be >= 1")
    require("synth.elevation_count", y.elevation_count >= 1, "must be >= 1")
    require("synth.max_range", y.max_range > 0, "must be > 0")

    for key, reference in REFERENCE_DEFAULTS.items():
        value = config.get(key)
        if key == "training.lambda_c" and value == 0:
            report.warnings.append((key, "0 disables the consistency term (this is the lambda_C = 0 ablation setting)"))
        elif value != reference:
            report.warnings.append((key, f"{format_value(value)} differs from the reference value {format_value(reference)}"))

    return report
