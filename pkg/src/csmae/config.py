"""Run configuration: dataclass sections, INI files, dotted-key overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .errors import ConfigError


@dataclass
class MaskingConfig:
    ratio: float = 0.5
    mode: str = "random"


@dataclass
class LossConfig:
    umr: bool = True
    cmr: bool = True
    mde: bool = False
    mim: bool = True
    tau: float = 0.5
    denominator_mode: str = "as-written"
    weight_umr: float = 1.0
    weight_cmr: float = 1.0
    weight_mde: float = 1.0
    weight_mim: float = 1.0


@dataclass
class OptimizerConfig:
    epochs: int = 150
    batch_size: int = 128
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    clip_grad: float = 0.0  # max grad norm; 0 disables clipping


@dataclass
class DataConfig:
    manifest: str = ""
    train_split: str = "train"
    query_split: str = "validation"
    archive_split: str = "test"
    k: int = 10
    # synth-data only
    n_pairs: int = 96
    n_classes: int = 6
    synth_side: int = 32
    split_fractions: str = "0.52,0.24,0.24"


@dataclass
class RunConfig:
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    dtype: str = "float32"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        o = self.optimizer
        if o.epochs < 1 or o.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= o.warmup_epochs < o.epochs:
            raise ConfigError(f"warmup_epochs ({o.warmup_epochs}) must be < epochs ({o.epochs})")
        if self.losses.mim and o.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the MIM loss is enabled")
        if self.losses.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.losses.denominator_mode not in ("as-written", "include-positive"):
            raise ConfigError(f"unknown denominator_mode {self.losses.denominator_mode!r}")
        if not (self.losses.umr or self.losses.cmr or self.losses.mde or self.losses.mim):
            raise ConfigError("at least one loss must be enabled")
        if self.masking.mode not in ("identical", "random", "disjoint"):
            raise ConfigError(f"unknown masking mode {self.masking.mode!r}")
        if self.run.dtype not in ("float32", "float64"):
            raise ConfigError("run.dtype must be float32 or float64")


SECTIONS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _section_type(name: str):
    return typing.get_type_hints(TrainConfig)[name]


def _coerce(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        return None if raw in ("", "none", "None") else _coerce(raw, inner)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if origin is dict:
        out = {}
        for item in filter(None, (s.strip() for s in raw.split(","))):
            k, _, v = item.partition(":")
            out[k.strip()] = int(v)
        return out
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(values: dict[str, dict], section: str, key: str, raw: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    hints = typing.get_type_hints(_section_type(section))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    try:
        values.setdefault(section, {})[key] = _coerce(raw, hints[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None


def _read_ini(values: dict[str, dict], text: str, origin: str) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {origin}: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(values, section, key, raw)


def build_config(path=None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    """``base`` (or defaults), then the INI file at ``path``, then ``section.key=value`` overrides."""
    values: dict[str, dict] = {}
    if base is not None:
        _read_ini(values, config_to_ini(base), "base config")
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        _read_ini(values, path.read_text(), str(path))
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        _apply(values, section, key, raw)
    try:
        sections = {name: _section_type(name)(**values.get(name, {})) for name in SECTIONS}
        return TrainConfig(**sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_ini(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_ini(text: str) -> TrainConfig:
    values: dict[str, dict] = {}
    _read_ini(values, text, "config text")
    return TrainConfig(**{name: _section_type(name)(**values.get(name, {})) for name in SECTIONS})


def write_resolved(cfg: TrainConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.write_text(config_to_ini(cfg))
    return path
