"""Strict TOML run configuration.

Layout::

    seed = 1
    out = "runs/desk"

    [city]        # CityConfig fields
    [model]       # d_model, n_layers, n_heads, d_ff, dropout, preset
    [data]        # window_len, battery_buckets, test_fraction, sample_levels
    [optimizer]   # OptimizerConfig fields
    [federation]  # FederationConfig fields
    [experiment]  # ExperimentSpec fields

Unknown sections or keys, wrong value types and out-of-range values raise
:class:`ConfigError` before any work starts.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Tuple

import tomli

from .errors import ConfigError
from .federation import FederationConfig
from .harness import ExperimentSpec
from .mobility import CityConfig
from .seqmodel.encoding import DEFAULT_LEVELS, TokenizerConfig
from .seqmodel.network import ModelConfig
from .seqmodel.training import OptimizerConfig
from .validation import check_fraction

PRESETS = ("desk", "full")


@dataclass(frozen=True)
class ModelSection:
    preset: str = "desk"
    d_model: Optional[int] = None
    n_layers: Optional[int] = None
    n_heads: Optional[int] = None
    d_ff: Optional[int] = None
    dropout: Optional[float] = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {PRESETS}")


@dataclass(frozen=True)
class DataConfig:
    window_len: int = 16
    battery_buckets: int = 10
    test_fraction: float = 0.2
    # None (an empty list in TOML) samples every labelled trip
    sample_levels: Optional[Tuple[float, ...]] = DEFAULT_LEVELS

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError("data.window_len must be >= 1")
        if self.battery_buckets < 1:
            raise ConfigError("data.battery_buckets must be >= 1")
        check_fraction(self.test_fraction, "data.test_fraction")
        if self.sample_levels is not None and len(self.sample_levels) == 0:
            object.__setattr__(self, "sample_levels", None)
        if self.sample_levels is not None:
            levels = tuple(float(x) for x in self.sample_levels)
            if any(not 0 < x <= 1 for x in levels):
                raise ConfigError("data.sample_levels must lie in (0, 1]")
            object.__setattr__(self, "sample_levels", levels)


def desk_city(**overrides):
    base = dict(communities=12, hotspots=3, ev_count=60, horizon_days=10)
    base.update(overrides)
    return CityConfig(**base)


@dataclass
class RunConfig:
    city: CityConfig = field(default_factory=desk_city)
    model_section: ModelSection = field(default_factory=ModelSection)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(lr=3e-3, batch_floor=16))
    federation: FederationConfig = field(
        default_factory=lambda: FederationConfig(local_epochs=20))
    experiment: ExperimentSpec = field(
        default_factory=lambda: ExperimentSpec(name="desk", ev_counts=(20, 40, 60)))
    out: str = "runs/fedmob"
    seed: int = 1

    def __post_init__(self):
        self.city.validate()
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.model  # builds and validates the model config

    @property
    def tokenizer(self):
        return TokenizerConfig(self.data.window_len, self.city.communities,
                               self.data.battery_buckets)

    @property
    def model(self):
        s = self.model_section
        if s.preset == "full":
            base = ModelConfig.full_scale(self.city.communities, self.data.battery_buckets,
                                           self.data.window_len)
        else:
            base = ModelConfig(self.city.communities, self.data.battery_buckets,
                               max_len=self.data.window_len)
        overrides = {k: getattr(s, k) for k in ("d_model", "n_layers", "n_heads", "d_ff", "dropout")
                     if getattr(s, k) is not None}
        return dataclasses.replace(base, **overrides)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def to_dict(self):
        """Plain nested dict of every section; the inverse of :func:`from_dict`."""
        def clean(obj):
            d = {}
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if v is None and f.name == "sample_levels":
                    v = ()
                if v is None:
                    continue
                d[f.name] = list(v) if isinstance(v, tuple) else v
            return d
        return {"seed": int(self.seed), "out": self.out,
                **{name: clean(getattr(self, attr)) for name, attr in SECTIONS.items()}}


SECTIONS = {"city": "city", "model": "model_section", "data": "data",
            "optimizer": "optimizer", "federation": "federation", "experiment": "experiment"}
SECTION_TYPES = {"city": CityConfig, "model": ModelSection, "data": DataConfig,
                 "optimizer": OptimizerConfig, "federation": FederationConfig,
                 "experiment": ExperimentSpec}
TOP_KEYS = {"seed", "out"}


def _check_type(where, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _build_section(name, cls, values, base):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        default = getattr(base, key)
        if default is not None:
            _check_type(f"{name}.{key}", value, default)
        if isinstance(value, list):
            value = list(value) if key == "ev_models" else tuple(value)
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(raw, base=None):
    """Build a validated :class:`RunConfig` from nested dicts. Keys that are
    absent keep the value of ``base`` (the desk defaults when omitted)."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    base = base or RunConfig()
    unknown = sorted(set(raw) - TOP_KEYS - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, attr in SECTIONS.items():
        if name in raw:
            kwargs[attr] = _build_section(name, SECTION_TYPES[name], raw[name],
                                          getattr(base, attr))
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = raw["seed"]
    if "out" in raw:
        if not isinstance(raw["out"], str):
            raise ConfigError("out must be a string")
        kwargs["out"] = raw["out"]
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc


def load_config(path):
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such configuration file") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
