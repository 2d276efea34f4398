"""Run configuration: one YAML document with a section per module.

Every field has a default, so an empty file (or no file) is a valid config.
Unknown keys and ill-typed values raise ConfigError naming the dotted path.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .datagen import DatasetConfig, jsonable
from .errors import ConfigError
from .models import BUILDERS, ModelConfig
from .render import RenderConfig
from .sim import SimParams
from .train import TrainConfig

TOOL_VERSION = "0.1.0"
# keys written into config echoes that are not settings themselves
ECHO_ONLY = ("tool_version", "command")


@dataclass(frozen=True)
class SensorSettings:
    """Keyword arguments of the sensor layout draw."""

    gain: float = 1.0
    play_width: float = 0.05
    drift_sigma: float = 0.002
    noise_sigma: float = 0.005
    min_coverage: float = 0.75


@dataclass(frozen=True)
class ModelSection:
    kind: str = "static_schema"
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.kind not in BUILDERS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {sorted(BUILDERS)}")


@dataclass(frozen=True)
class AnalysisConfig:
    split: str = "test"
    lag_signal: str = "action"
    lags: tuple[int, ...] = tuple(range(0, 21))
    layer: str | None = None  # default: penultimate transposed convolution
    frame: int | None = None  # default: first frame touching an object
    draws: int = 100
    diagnostic: bool = False
    ae_epochs: int | None = None  # compare: autoencoder epochs (default train.epochs)
    rnn_epochs: int | None = None  # compare: recurrent predictor epochs


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sim: SimParams = field(default_factory=SimParams)
    sensors: SensorSettings = field(default_factory=SensorSettings)
    render: RenderConfig = field(default_factory=RenderConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> None:
        try:
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}") from None
        if self.render.width != self.render.height:
            raise ConfigError("render: images must be square")
        if self.model.config.image_size != self.render.height:
            raise ConfigError(
                f"model.config.image_size {self.model.config.image_size} differs from render size {self.render.height}"
            )

    def to_dict(self) -> dict:
        return jsonable(self)

    def dump(self, path, command: str | None = None) -> None:
        doc = {"tool_version": TOOL_VERSION, "command": command, **self.to_dict()}
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def _resolve_hints(cls) -> dict:
    import importlib

    module = importlib.import_module(cls.__module__)
    return typing.get_type_hints(cls, vars(module))


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(tp):
        return build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, str):  # YAML 1.1 reads "1e9" as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def build(cls, data, path: str = ""):
    """Instantiate dataclass `cls` from a nested mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = _resolve_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {(path + '.' if path else '') + str(unknown[0])}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def load_config(path=None, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {str(exc).splitlines()[0]}") from None
    if isinstance(data, dict):
        data = {k: v for k, v in data.items() if k not in ECHO_ONLY}
    cfg = build(RunConfig, data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg
