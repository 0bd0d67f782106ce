"""Experiment configuration: nested dataclasses, JSON files and dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .date import VARIANTS as DATE_VARIANTS
from .vlcm import VARIANTS as VLCM_VARIANTS

# Core ablation rows: (sse, date, vlcm) toggles.
ROWS = {
    "a": (True, True, True),
    "b": (False, True, True),
    "c": (True, True, False),
    "d": (True, False, True),
    "e": (False, False, False),
}
ROW_LABELS = {
    "a": "full model",
    "b": "w/o SSE",
    "c": "w/o VLCM",
    "d": "w/o DATE",
    "e": "baseline (none)",
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = "data/manifest.json"
    n: int = 1000
    seed: int = 0


@dataclass
class EncoderConfig:
    checkpoint: str = ""
    pretrain_steps: int = 200
    seed: int = 0


@dataclass
class ModelConfig:
    sse: bool = True
    date: bool = True
    vlcm: bool = True
    date_variant: str = "inject"
    vlcm_variant: str = "gated"
    fusion_dim: int = 128
    msda_heads: int = 4
    msda_points: int = 4
    msda_layers: int = 2
    date_heads: int = 4
    vlcm_heads: int = 4
    agg_dim: int = 64
    agg_blocks: int = 2
    cost_prior: float = 10.0

    @property
    def effective_date(self) -> str:
        return self.date_variant if self.date else "main_only"

    @property
    def effective_vlcm(self) -> str:
        return self.vlcm_variant if self.vlcm else "none"


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 250
    val_limit: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m, t = self.model, self.train
        if m.date_variant not in DATE_VARIANTS:
            raise ConfigError(f"model.date_variant must be one of {DATE_VARIANTS}")
        if m.vlcm_variant not in VLCM_VARIANTS:
            raise ConfigError(f"model.vlcm_variant must be one of {VLCM_VARIANTS}")
        if t.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if t.steps < 0:
            raise ConfigError("train.steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_row(self, row: str) -> "ExperimentConfig":
        if row not in ROWS:
            raise ConfigError(f"unknown ablation row {row!r}")
        sse, date, vlcm = ROWS[row]
        return replace(self, model=replace(self.model, sse=sse, date=date, vlcm=vlcm))

    def override(self, dotted: str, value: str) -> "ExperimentConfig":
        d = self.to_dict()
        keys = dotted.split(".")
        node = d
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node or isinstance(node[keys[-1]], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = _coerce(node[keys[-1]], value, dotted)
        return ExperimentConfig.from_dict(d)


def _coerce(current: Any, raw: str, key: str) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in d:
            continue
        default = f.default_factory() if callable(f.default_factory) else f.default  # type: ignore[misc]
        if is_dataclass(default):
            kwargs[name] = _build(type(default), d[name], f"{prefix}{name}.")
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)
