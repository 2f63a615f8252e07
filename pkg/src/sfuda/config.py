"""Run configuration: dataclasses plus an INI-style reader/writer.

A config file has the sections ``[run]``, ``[data]``, ``[model]``,
``[source]`` and ``[adapt]``; every key maps to a dataclass field and unknown
keys or sections are rejected. Missing keys keep their defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SourceConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    label_smoothing: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must lie in [0, 0.5)")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("invalid source training schedule")


@dataclass(frozen=True)
class AdaptationConfig:
    k_neighbors: int = 10
    history_length: int = 5
    bank_capacity: int = 0  # 0: one slot per target sample
    queue_capacity: int = 256
    ema_momentum: float = 0.99
    temperature: float = 0.07
    gamma_cls: float = 1.0
    gamma_ctr: float = 1.0
    gamma_div: float = 1.0
    weighting: str = "exponential"
    hard_threshold: float = 0.75
    classification_mode: str = "negative"
    exclusion_rule: str = "aligned"
    refinement: bool = True
    contrastive: bool = True
    negative_learning: bool = True
    temporal_exclusion: bool = True
    uncertainty_reweighting: bool = True
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    sgd_momentum: float = 0.9

    def validate(self) -> None:
        if self.k_neighbors < 1 or self.history_length < 1:
            raise ConfigError("k_neighbors and history_length must be >= 1")
        if self.bank_capacity < 0 or self.queue_capacity < 1:
            raise ConfigError("capacities must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.weighting not in ("exponential", "linear", "hard"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.classification_mode not in ("negative", "positive", "positive_plus_negative"):
            raise ConfigError(f"unknown classification_mode {self.classification_mode!r}")
        if self.exclusion_rule not in ("aligned", "any"):
            raise ConfigError(f"unknown exclusion_rule {self.exclusion_rule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("invalid adaptation schedule")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("sgd_momentum must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.source.validate()
        self.adapt.validate()
        if self.model.n_classes != self.data.n_classes:
            raise ConfigError("model.n_classes must equal data.n_classes")
        if self.model.input_dim != 2:
            raise ConfigError("synthetic data is two-dimensional; model.input_dim must be 2")

    def replace(self, **sections) -> RunConfig:
        """Copy with per-section overrides, e.g. ``replace(adapt={"contrastive": False})``."""
        updates = {}
        for name, value in sections.items():
            if name == "seed":
                updates["seed"] = int(value)
            else:
                updates[name] = dataclasses.replace(getattr(self, name), **value)
        return dataclasses.replace(self, **updates)


_SECTIONS = ("data", "model", "source", "adapt")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _section_values(obj) -> dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def to_ini(config: RunConfig, extra: dict[str, dict[str, object]] | None = None) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(config.seed)}
    for name in _SECTIONS:
        parser[name] = _section_values(getattr(config, name))
    for name, values in (extra or {}).items():
        parser[name] = {k: _format(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, allow_extra_sections: tuple[str, ...] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    default = RunConfig()
    seed = default.seed
    sections = {}
    for name in parser.sections():
        if name in allow_extra_sections:
            continue
        if name == "run":
            for key, raw in parser[name].items():
                if key != "seed":
                    raise ConfigError(f"unknown config key: run.{key}")
                seed = _parse(raw, 0, "run.seed")
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section: {name}")
        base = getattr(default, name)
        fields = {f.name for f in dataclasses.fields(base)}
        values = {}
        for key, raw in parser[name].items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {name}.{key}")
            values[key] = _parse(raw, getattr(base, key), f"{name}.{key}")
        sections[name] = values
    config = default.replace(seed=seed, **sections)
    config.validate()
    return config


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    return from_ini(Path(path).read_text())


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(to_ini(config))
