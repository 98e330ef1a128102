"""Experiment configuration: nested dataclasses read from JSON with strict key checking.

Every field has a default, so an empty file (or ``{}``) is a complete config.
Unknown keys are rejected with their dotted path, e.g. ``train.learningrate``.
"""
from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .edgebudget import CostModel
from .harness import ConvergenceRule, TrainParams
from .synthgen import DRIFT_PRESETS
from .tinynet import NetConfig

OUTPUT_ROOT_ENV = "BMITL_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic subject and sessions. Session 0 is recorded without drift; every
    later session gets its own draw of the ``drift`` preset."""

    n_runs: int = 12
    n_sessions: int = 2
    drift: str = "strong"
    channels_per_class: int = 2
    signature_amplitude: tuple[float, float] = (0.8, 1.2)
    alpha: float = 1.0
    noise_floor: float = 0.5
    shared_amplitude: float = 6.0
    shared_jitter: float = 0.5
    n_shared: int = 2

    def __post_init__(self):
        if self.drift not in DRIFT_PRESETS:
            raise ConfigError(f"synth.drift: unknown preset {self.drift!r}")
        if not 12 <= self.n_runs <= 20:
            raise ConfigError("synth.n_runs must lie in [12, 20]")
        if self.n_sessions < 1:
            raise ConfigError("synth.n_sessions must be >= 1")


@dataclass(frozen=True)
class FoldConfig:
    train: int = 8
    val: int = 2
    step: int = 1


@dataclass(frozen=True)
class TLConfig:
    """The scheme follows from the subcommand: ``tl`` is one-to-one when
    ``pretrain_sessions`` is 1 and multi-to-one otherwise; ``chain`` is chain TL."""

    k_train: int = 3
    n_val: int = 2
    epoch_rule: str = "best_val"
    max_epochs: int = 250
    pretrain_sessions: int = 1
    pretrain_epochs: int | None = None  # None: chosen by the convergence rule on CV curves
    multi_session_step: int = 2  # CV fold step over concatenated pretraining sessions

    def __post_init__(self):
        if self.epoch_rule not in ("best_val", "fixed"):
            raise ConfigError(f"tl.epoch_rule: unknown rule {self.epoch_rule!r}")
        if self.k_train < 1:
            raise ConfigError("tl.k_train must be >= 1")
        if self.n_val < 0 or self.max_epochs < 0:
            raise ConfigError("tl.n_val and tl.max_epochs must be >= 0")
        if self.n_val == 0 and self.epoch_rule != "fixed":
            raise ConfigError("tl.n_val=0 requires epoch_rule 'fixed'")
        if self.multi_session_step < 1:
            raise ConfigError("tl.multi_session_step must be >= 1")
        if self.pretrain_sessions < 1:
            raise ConfigError("tl.pretrain_sessions must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    sessions: tuple[str, ...] = ()  # session directories; empty means synthesise
    output_dir: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainParams = field(default_factory=TrainParams)
    folds: FoldConfig = field(default_factory=FoldConfig)
    convergence: ConvergenceRule = field(default_factory=ConvergenceRule)
    tl: TLConfig = field(default_factory=TLConfig)
    cost: CostModel = field(default_factory=CostModel)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {(path + '.' if path else '') + key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}" if path else f.name)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing key {(path + '.' if path else '') + f.name!r}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return _build(ExperimentConfig, data)


def parse_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON config; ``None`` or an empty file gives all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not text.strip():
        return ExperimentConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(asdict(cfg))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Deep-merge ``overrides`` into ``cfg`` and re-validate."""

    def merge(base, upd):
        out = dict(base)
        for k, v in upd.items():
            out[k] = merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
        return out

    return config_from_dict(merge(config_to_dict(cfg), overrides))
