"""Strict JSON experiment configuration.

Every section maps onto a dataclass; unknown keys and mistyped values are
errors, so a typo can never fall back to a default silently.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .noise import NOISE_KINDS
from .semi import MixMatchSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_path: list | None = None
    test_path: list | None = None

    def validate(self) -> None:
        if self.kind not in ("synthetic", "container", "cifar10", "cifar100-fine"):
            raise ConfigError(f"dataset.kind: unknown dataset kind {self.kind!r}")
        if self.kind != "synthetic" and (not self.train_path or not self.test_path):
            raise ConfigError(f"dataset.kind {self.kind!r} needs train_path and test_path")


@dataclass
class MatrixSpec:
    noise_kinds: list | None = None
    noise_rates: list | None = None
    seeds: list = field(default_factory=lambda: [0])
    ablation: bool = False
    semi: list = field(default_factory=lambda: [False])

    def validate(self) -> None:
        for kind in self.noise_kinds or []:
            if kind not in NOISE_KINDS:
                raise ConfigError(f"matrix.noise_kinds: unknown noise kind {kind!r}")
        for rate in self.noise_rates or []:
            if not 0 <= rate <= 1:
                raise ConfigError(f"matrix.noise_rates: rate {rate} outside [0, 1]")
        if not self.seeds:
            raise ConfigError("matrix.seeds must list at least one seed")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mixmatch: MixMatchSpec = field(default_factory=MixMatchSpec)
    matrix: MatrixSpec = field(default_factory=MatrixSpec)

    def validate(self) -> None:
        self.dataset.validate()
        self.matrix.validate()
        try:
            self.train.validate()
            self.mixmatch.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0] if len(args) == 1 else tp, True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    origin = typing.get_origin(tp) or tp
    if origin is bool:
        ok = isinstance(value, bool)
    elif origin is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif origin is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif origin is str:
        ok = isinstance(value, str)
    elif origin is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(origin, '__name__', origin)}, got {type(value).__name__}")
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def parse(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())
