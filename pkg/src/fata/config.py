"""Strict JSON experiment configs, dotted overrides, sweeps and seed splitting.

A config file is one JSON object::

    {
      "task":        {"kind": "patterns", ...SyntheticTask fields...},
      "model":       {...ModelConfig fields...},
      "pretrain":    {...PretrainConfig fields...},
      "stream":      {...StreamConfig fields...},
      "corruptions": {"families": [...], "severities": [5]},
      "method":      "ent_min+fata",
      "adapt":       {...AdaptConfig fields except method...},
      "seeds":       [0, 1, 2],
      "out_dir":     "runs/example",
      "sweep":       {"adapt.sigma_n": [0.1, 0.5, 1, 5, 10]}
    }

Only ``task`` (with its ``kind``) is required. Unknown keys anywhere are
rejected. ``task.seed`` is not accepted: the dataset seed is derived from the
run seed like every other random stream.
"""

from __future__ import annotations

import copy
import itertools
import json
import types
import typing
import zlib
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .adaptation import METHODS, AdaptConfig
from .data import FAMILIES, SCENARIOS, SyntheticTask
from .nn import StackConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


SEED_PURPOSES = ("data", "init", "pretrain", "stream", "corruption", "noise")


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 32-bit seed for one purpose, derived from the run seed."""
    if purpose not in SEED_PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (32, 64, 64, 64)
    norm: str = "batch"
    num_groups: int = 4
    activation: str = "relu"
    eps: float = 1e-5
    pool_after: tuple[int, ...] | None = None  # None: (1,) for images, () for vectors


@dataclass
class PretrainConfig:
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    n_train: int = 3000
    n_val: int = 1000

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0, lr >= 0 and batch_size >= 1 are required")


@dataclass
class StreamConfig:
    scenario: str = "normal"
    batch_size: int = 64
    n_test: int = 2560
    num_batches: int | None = None

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class CorruptionGrid:
    families: tuple[str, ...] = FAMILIES
    severities: tuple[int, ...] = (5,)

    def __post_init__(self) -> None:
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown families {bad}; expected a subset of {FAMILIES}")
        if any(not 0 <= s <= 5 for s in self.severities):
            raise ValueError("severities must lie in 0..5")


@dataclass
class ExperimentConfig:
    task: SyntheticTask
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    corruptions: CorruptionGrid = field(default_factory=CorruptionGrid)
    method: str = "ent_min+fata"
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    sweep: dict[str, list] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        self.adapt.method = self.method
        if self.adapt.aug_position >= len(self.model.widths):
            raise ValueError(f"adapt.aug_position must be < {len(self.model.widths)}")
        self.stack_config()

    def stack_config(self) -> StackConfig:
        model = asdict(self.model)
        if model["pool_after"] is None:
            model["pool_after"] = (1,) if self.task.kind == "patterns" else ()
        return StackConfig(input_shape=self.task.input_shape, num_classes=self.task.num_classes,
                           **model)

    def task_for(self, seed: int) -> SyntheticTask:
        return SyntheticTask(**{**asdict(self.task), "seed": derive_seed(seed, "data")})

    def to_dict(self) -> dict:
        d = json.loads(json.dumps(asdict(self)))
        d["task"].pop("seed")
        d["adapt"].pop("method")
        return d


# fields a file may not set, per section
_FORBIDDEN = {"task": ("seed",), "adapt": ("method",)}
_REQUIRED = {"task": ("kind",)}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = args[0] if args else Any
        out = [v if item is Any else _coerce(item, v, f"{where}[{k}]") for k, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return dict(value)
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    section = where.split(".")[-1]
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in fields(cls) if f.init} - set(_FORBIDDEN.get(section, ()))
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    for name in _REQUIRED.get(section, ()):
        if name not in data:
            raise ConfigError(f"missing required field {where}.{name}")
    for f in fields(cls):
        if f.init and f.default is MISSING and f.default_factory is MISSING and f.name not in data:
            raise ConfigError(f"missing required field {where}.{f.name}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for key in raw.get("sweep", {}) if isinstance(raw.get("sweep"), dict) else ():
        _check_path(raw, key)
    return _build(ExperimentConfig, raw, "config")


def _check_path(raw: dict, dotted: str) -> None:
    """Sweep and override keys must name a real field."""
    cls = ExperimentConfig
    parts = dotted.split(".")
    for k, part in enumerate(parts):
        names = {f.name for f in fields(cls)}
        if part not in names or part in _FORBIDDEN.get(parts[k - 1] if k else "", ()):
            raise ConfigError(f"unknown config key {dotted!r}")
        hint = typing.get_type_hints(cls)[part]
        if k < len(parts) - 1:
            if not is_dataclass(hint):
                raise ConfigError(f"unknown config key {dotted!r}")
            cls = hint


def parse_override(text: str) -> tuple[str, Any]:
    """``key.path=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, _, value = text.partition("=")
    key = key.strip()
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key, parsed


def apply_override(raw: dict, key: str, value) -> dict:
    _check_path(raw, key)
    raw = copy.deepcopy(raw)
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part} is not an object")
    node[parts[-1]] = value
    return raw


def load(path: str | Path | None = None, overrides: list[str] = (), raw: dict | None = None) -> tuple[dict, ExperimentConfig]:
    """Read a config file (or ``raw``), apply overrides, validate.

    Returns the raw dict (after overrides) and the validated config.
    """
    if raw is None:
        if path is None:
            raise ConfigError("no config given")
        try:
            raw = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    for text in overrides:
        raw = apply_override(raw, *parse_override(text))
    return raw, from_dict(raw)


def expand_sweep(raw: dict) -> list[tuple[str, dict, ExperimentConfig]]:
    """Cartesian product of the ``sweep`` field as ``(tag, raw, config)`` triples.

    Without a sweep the single entry has tag ``""``.
    """
    sweep = raw.get("sweep") or {}
    base = {k: v for k, v in raw.items() if k != "sweep"}
    keys = sorted(sweep)
    for k in keys:
        if not isinstance(sweep[k], list) or not sweep[k]:
            raise ConfigError(f"sweep.{k}: expected a non-empty list")
    out = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        variant = base
        for k, v in zip(keys, combo):
            variant = apply_override(variant, k, v)
        tag = ",".join(f"{k}={json.dumps(v)}" for k, v in zip(keys, combo))
        out.append((tag, variant, from_dict(variant)))
    return out
