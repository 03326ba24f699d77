"""Run configuration: one JSON document covering data generation, training and evaluation.

Every key is optional; omitted keys take the dataclass defaults, printed by
``essl defaults``. Unknown keys and ill-typed values are rejected with the
dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .geom import AugmentConfig
from .loss import LossWeights
from .train import TrainConfig
from .voxel import VoxelGridConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the field."""


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    views_per_pair: int = 10

    def __post_init__(self):
        if self.views_per_pair < 1:
            raise ValueError("views_per_pair must be positive")


@dataclass(frozen=True)
class PathsConfig:
    """Dataset directories; command-line flags take precedence."""

    train_data: str | None = None
    eval_data: str | None = None


# train-section scalars; the nested loss/augment/grid configs get their own sections
_TRAIN_FIELDS = tuple(
    f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("loss", "augment", "grid")
)
_SECTIONS = {
    "train": TrainConfig,
    "loss": LossWeights,
    "augment": AugmentConfig,
    "grid": VoxelGridConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_overrides(self, *, steps: int | None = None, seed: int | None = None) -> RunConfig:
        train = self.train
        if steps is not None:
            train = _build("train.total_steps", TrainConfig, {**_fields(train), "total_steps": steps})
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        synth = self.synth if seed is None else dataclasses.replace(self.synth, seed=seed)
        return dataclasses.replace(self, train=train, synth=synth)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "train": {k: _jsonable(getattr(t, k)) for k in _TRAIN_FIELDS},
            "loss": _as_dict(t.loss),
            "augment": _as_dict(t.augment),
            "grid": _as_dict(t.grid),
            "synth": _as_dict(self.synth),
            "eval": _as_dict(self.eval),
            "paths": _as_dict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _as_dict(obj) -> dict:
    return {k: _jsonable(v) for k, v in _fields(obj).items()}


def _coerce(path: str, value, default):
    """Check ``value`` against the type of ``default`` and convert JSON lists to tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{path}: must be finite")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} numbers, got {value!r}")
        return tuple(_coerce(f"{path}[{i}]", v, float(d)) for i, (v, d) in enumerate(zip(value, default)))
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string or null, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build(path: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _section(name: str, cls, doc: dict, allowed=None) -> dict:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = _fields(cls())
    allowed = allowed if allowed is not None else tuple(defaults)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {', '.join(allowed)})")
    return {k: _coerce(f"{name}.{k}", v, defaults[k]) for k, v in raw.items()}


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section (allowed: {', '.join(_SECTIONS)})")
    loss = _build("loss", LossWeights, _section("loss", LossWeights, doc))
    augment = _build("augment", AugmentConfig, _section("augment", AugmentConfig, doc))
    grid = _build("grid", VoxelGridConfig, _section("grid", VoxelGridConfig, doc))
    train_vals = _section("train", TrainConfig, doc, allowed=_TRAIN_FIELDS)
    train = _build("train", TrainConfig, {**train_vals, "loss": loss, "augment": augment, "grid": grid})
    synth = _build("synth", SynthConfig, _section("synth", SynthConfig, doc))
    ev = _build("eval", EvalConfig, _section("eval", EvalConfig, doc))
    paths = _build("paths", PathsConfig, _section("paths", PathsConfig, doc))
    return RunConfig(train, synth, ev, paths)


def load(path) -> RunConfig:
    """Parse a config file; ``None`` gives the defaults. Raises OSError or ConfigError."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(doc)
