"""Run configuration: one JSON document covering every component, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .backbone import ConfigError
from .data import DomainConfig, source_domain, target_domain
from .engine import AdaptConfig, TrainConfig
from .losses import METRICS, LossConfig
from .model import ModelConfig


@dataclass
class DataConfig:
    n_source: int = 2000
    n_val: int = 200
    n_target: int = 200
    source: DomainConfig = field(default_factory=source_domain)
    target: DomainConfig = field(default_factory=target_domain)


@dataclass
class SweepConfig:
    seeds: tuple = (0, 1, 2)
    ks: tuple = (1, 2, 4, 8)
    k_methods: tuple = ("min-entropy", "max-squares", "trans-consistency")
    lambdas: tuple = (0.01, 0.1, 1.0, 10.0)
    layers: tuple = (1, 2, 3, 4)
    metrics: tuple = METRICS
    taps: tuple = ("block3", "block4", "block2", "block1", "logits")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> None:
        for part in (self.loss, self.train, self.adapt, self.augment, self.model.transformer):
            try:
                part.validate()
            except ValueError as e:
                raise ConfigError(str(e)) from e
        if self.data.n_source < 1 or self.data.n_target < 1 or self.data.n_val < 1:
            raise ConfigError("dataset split sizes must be >= 1")
        if self.model.num_classes != self.data.source.num_classes:
            raise ConfigError("model.num_classes must match data.source.num_classes")

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))


def derive_seed(master: int, name: str) -> int:
    """Named sub-seed so that changing one stream never perturbs another."""
    return (master * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 31)


def _to_jsonable(v):
    if isinstance(v, dict):
        return {k: _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        tp = hints.get(key)
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, sub)
            continue
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list")
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{sub}: expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{sub}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{sub}: expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{sub}: expected a string")
        kwargs[key] = value
    if cls is DataConfig:
        # domain sections start from their own defaults
        for key, factory in (("source", source_domain), ("target", target_domain)):
            if key in data:
                merged = dataclasses.asdict(factory())
                merged.update(data[key])
                kwargs[key] = _build(DomainConfig, merged, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    p = Path(out_dir) / "resolved_config.json"
    p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return p
