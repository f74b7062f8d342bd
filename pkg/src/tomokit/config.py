"""
Run configuration: INI sections mapped onto typed dataclasses.

Every key is optional and falls back to the defaults below. Unknown sections
and keys are rejected by name. dump_config() writes the fully defaulted
configuration; parsing that text again gives an equal RunConfig.

Optional numeric keys accept "auto" for "derive from the data".
"""

import configparser
import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple

from .errors import ConfigError
from .geometry import (DEFAULT_BASELINE_COUNT, DEFAULT_BASELINE_SPAN, DEFAULT_INCIDENCE_DEG,
                       DEFAULT_PLATFORM_HEIGHT, DEFAULT_REFERENCE_RANGE, DEFAULT_WAVELENGTH,
                       TomoGeometry, uniform_baselines)
from .solvers import SolverConfig

logger = logging.getLogger(__name__)

AUTO = "auto"

# Applied by desk_scale to training keys the file does not set.
DESK_OVERRIDES = {"stage1_epochs": 10, "stage2_epochs": 15, "stage2_batch": 2}


@dataclass
class GeometryConfig:
    wavelength: float = DEFAULT_WAVELENGTH
    reference_range: float = DEFAULT_REFERENCE_RANGE
    incidence_deg: float = DEFAULT_INCIDENCE_DEG
    platform_height: Optional[float] = DEFAULT_PLATFORM_HEIGHT
    baseline_count: int = DEFAULT_BASELINE_COUNT
    baseline_span: float = DEFAULT_BASELINE_SPAN
    baselines: Optional[Tuple[float, ...]] = None
    elevation_bins: int = 128
    elevation_spacing: float = 1.0
    elevation_origin: float = 0.0
    range_spacing: float = 1.0
    azimuth_spacing: float = 1.0

    def to_geometry(self) -> TomoGeometry:
        """Validated TomoGeometry; explicit baselines win over count/span."""
        baselines = self.baselines or uniform_baselines(self.baseline_count, self.baseline_span)
        return TomoGeometry(
            baselines=baselines, wavelength=self.wavelength, reference_range=self.reference_range,
            incidence_deg=self.incidence_deg, elevation_bins=self.elevation_bins,
            elevation_spacing=self.elevation_spacing, elevation_origin=self.elevation_origin,
            range_spacing=self.range_spacing, azimuth_spacing=self.azimuth_spacing,
            platform_height=self.platform_height)


@dataclass
class SimulationConfig:
    scenes: int = 54
    ranges: int = 152
    azimuths: int = 200
    snr_db: float = 20.0
    density: float = 4.0
    seed: int = 0
    max_buildings: int = 3
    min_height: float = 6.0
    max_height: float = 24.0


@dataclass
class SolverSettings:
    variant: str = "fista"
    step: Optional[float] = None
    threshold: Optional[float] = None
    max_iters: int = 1000
    stop_tol: float = 1e-6

    def to_solver_config(self, variant: Optional[str] = None) -> SolverConfig:
        return SolverConfig(step=self.step, threshold=self.threshold, max_iters=self.max_iters,
                            stop_tol=self.stop_tol, variant=variant or self.variant)


@dataclass
class NetworkConfig:
    blocks: int = 5
    prenet_variant: str = "untied"
    mu0: Optional[float] = None
    theta0: Optional[float] = None
    smoothing_eps: float = 1e-8
    channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    merge: str = "max"


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage1_batch: int = 128
    stage1_lr: float = 1e-5
    stage2_epochs: int = 50
    stage2_batch: int = 32
    stage2_lr: float = 1e-4
    l1_weight: float = 0.01
    seed: int = 0
    freeze_prenet: bool = False
    desk_scale: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class EvaluationConfig:
    tau_rel: float = 0.1
    statistic: str = "mean"
    accuracy_slack: float = 0.25


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the simulation and training seeds replaced."""
        return dataclasses.replace(
            self, simulation=dataclasses.replace(self.simulation, seed=seed),
            training=dataclasses.replace(self.training, seed=seed))


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(section: str, key: str, text: str, kind):
    text = text.strip()
    where = f"[{section}] {key}"
    origin = typing.get_origin(kind)
    if origin is typing.Union:
        inner = [t for t in typing.get_args(kind) if t is not type(None)][0]
        if text.lower() in (AUTO, "none", ""):
            return None
        return _parse_value(section, key, text, inner)
    if origin is tuple:
        inner = typing.get_args(kind)[0]
        parts = [p for p in text.replace(",", " ").split() if p]
        if not parts:
            raise ConfigError(f"{where}: expected a list of values")
        return tuple(_parse_value(section, key, p, inner) for p in parts)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse '{text}' as {kind.__name__}") from e
    return text


def _format_value(value) -> str:
    if value is None:
        return AUTO
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _validate(cfg: RunConfig) -> None:
    sim, train, net, ev = cfg.simulation, cfg.training, cfg.network, cfg.evaluation
    checks = [
        (sim.scenes >= 1, "[simulation] scenes must be >= 1"),
        (sim.ranges >= 1 and sim.azimuths >= 1, "[simulation] ranges and azimuths must be >= 1"),
        (not math.isnan(sim.snr_db), "[simulation] snr_db must be a number or inf"),
        (sim.density > 0, "[simulation] density must be positive"),
        (0 < sim.min_height <= sim.max_height, "[simulation] need 0 < min_height <= max_height"),
        (sim.max_buildings >= 1, "[simulation] max_buildings must be >= 1"),
        (train.stage1_epochs >= 1 and train.stage2_epochs >= 1, "[training] epochs must be >= 1"),
        (train.stage1_batch >= 1 and train.stage2_batch >= 1, "[training] batch sizes must be >= 1"),
        (train.stage1_lr > 0 and train.stage2_lr > 0, "[training] learning rates must be positive"),
        (train.l1_weight >= 0, "[training] l1_weight must be >= 0"),
        (0 <= train.adam_beta1 < 1 and 0 <= train.adam_beta2 < 1, "[training] Adam betas must lie in [0, 1)"),
        (train.adam_eps > 0, "[training] adam_eps must be positive"),
        (net.blocks >= 1, "[network] blocks must be >= 1"),
        (net.prenet_variant in ("untied", "step"), "[network] prenet_variant must be untied or step"),
        (net.smoothing_eps >= 0, "[network] smoothing_eps must be >= 0"),
        (all(c >= 1 for c in net.channels), "[network] channels must be positive"),
        (net.merge in ("max", "sum"), "[network] merge must be max or sum"),
        (net.mu0 is None or net.mu0 > 0, "[network] mu0 must be positive"),
        (net.theta0 is None or net.theta0 >= 0, "[network] theta0 must be >= 0"),
        (0 < ev.tau_rel < 1, "[evaluation] tau_rel must lie in (0, 1)"),
        (ev.statistic in ("mean", "median", "rms"), "[evaluation] statistic must be mean, median or rms"),
        (ev.accuracy_slack >= 0, "[evaluation] accuracy_slack must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    try:
        cfg.solver.to_solver_config()
        cfg.geometry.to_geometry()
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text into a validated RunConfig."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e

    values: Dict[str, object] = {}
    explicit: Dict[str, Set[str]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            kwargs[key] = _parse_value(section, key, raw, hints[key])
        explicit[section] = set(kwargs)
        values[section] = cls(**kwargs)

    cfg = RunConfig(**values)
    if cfg.training.desk_scale:
        unset = {k: v for k, v in DESK_OVERRIDES.items() if k not in explicit.get("training", set())}
        if unset:
            cfg.training = dataclasses.replace(cfg.training, **unset)
            logger.debug("desk scale overrides: %s", unset)
    _validate(cfg)
    return cfg


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read a config file; None gives the defaults."""
    if path is None:
        return parse_config("")
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, source=path)


def dump_config(cfg: RunConfig) -> str:
    """Every section and key with its effective value."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            lines.append(f"{f.name} = {_format_value(getattr(getattr(cfg, section), f.name))}")
        lines.append("")
    return "\n".join(lines)
