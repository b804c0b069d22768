"""Strict run configuration with a canonical, platform-stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .bridge import BridgeTrainConfig, SamplerConfig
from .datagen import CorpusSpec
from .denoiser import DenoiserSpec
from .schedule import NoiseSchedule
from .wsc import WscSpec, WscTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    feature_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    wsc: WscSpec = field(default_factory=WscSpec)
    wsc_train: WscTrainConfig = field(default_factory=WscTrainConfig)
    bridge_train: BridgeTrainConfig = field(default_factory=BridgeTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def build(cls, data, path="config"):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = _default_of(fields[name])
        if dataclasses.is_dataclass(default):
            kwargs[name] = build(type(default), value, f"{path}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)) or isinstance(value, bool) \
                and not isinstance(default, bool):
            raise ConfigError(f"{path}.{name}: expected a number")
        else:
            kwargs[name] = float(value) if isinstance(default, float) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    return build(RunConfig, data)


def config_from_dict(data) -> RunConfig:
    return build(RunConfig, data)
