"""Experiment configuration: nested frozen dataclasses plus a strict parser.

Configuration documents are YAML (JSON is accepted, being a YAML subset).
Every key is optional; unknown keys, wrong types and violated constraints are
rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import types
import typing
from dataclasses import dataclass, field

import yaml

from .tasks import FactorWorldSpec, SinusoidSpec

MODES = ("plain", "causal")
TASK_KINDS = ("regression", "classification")
ABLATIONS = ("none", "xi", "fgr", "both")
ACTIVATIONS = ("tanh", "relu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CausalHyper:
    lambda1: float = 0.4
    lambda2: float = 0.2
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    alpha3: float = 1e-3
    alpha4: float = 1e-3
    # "factor": entropy of factor-usage mass; "task": entropy of per-task mass
    entropy: str = "factor"
    # "squared" or "signed" pairwise column inner products
    xi_penalty: str = "squared"
    # grouping normaliser: "sum" or "max"
    norm: str = "sum"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"causal.{name} must be non-negative")
        _choice("causal.entropy", self.entropy, ("factor", "task"))
        _choice("causal.xi_penalty", self.xi_penalty, ("squared", "signed"))
        _choice("causal.norm", self.norm, ("sum", "max"))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 1
    output_dim: int = 1
    encoder_hidden: tuple[int, ...] = (40,)
    n_z: int = 40
    n_factors: int = 12
    head_hidden: tuple[int, ...] = ()
    hidden_act: str = "relu"
    # defaults to (2 * n_factors,)
    grouping_hidden: tuple[int, ...] | None = None
    # widen the plain-mode encoder until its parameter count matches causal mode
    match_params: bool = True

    def __post_init__(self):
        widths = (self.input_dim, self.output_dim, self.n_z, self.n_factors,
                  *self.encoder_hidden, *self.head_hidden, *(self.grouping_hidden or ()))
        if any(w < 1 for w in widths):
            raise ConfigError("model widths must be positive")
        if self.n_factors < 2:
            raise ConfigError("model.n_factors must be >= 2")
        _choice("model.hidden_act", self.hidden_act, ACTIVATIONS)

    @property
    def grouping_widths(self) -> tuple[int, ...]:
        hidden = self.grouping_hidden if self.grouping_hidden is not None else (2 * self.n_factors,)
        return (self.n_factors, *hidden, self.n_factors)


@dataclass(frozen=True)
class SweepConfig:
    base_batch: int = 4
    iterations: int = 2000
    seeds: tuple[int, ...] = tuple(range(10))
    modes: tuple[str, ...] = ("plain", "causal")
    shots: int = 10
    queries: int = 10
    eval_tasks: int = 100
    # "all": every co-batched pair is confounded; "adjacent": disjoint pairs
    pairing: str = "all"
    # classification rates; the top-level rates are the sinusoid defaults
    inner_lr: float = 0.1
    outer_lr: float = 0.01
    outer_optimizer: str = "sgd"

    def __post_init__(self):
        if min(self.base_batch, self.iterations, self.eval_tasks, self.shots, self.queries) < 1:
            raise ConfigError("sweep sizes must be >= 1")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("sweep learning rates must be non-negative")
        if not self.seeds:
            raise ConfigError("sweep.seeds must be non-empty")
        for m in self.modes:
            _choice("sweep.modes", m, MODES)
        _choice("sweep.pairing", self.pairing, ("all", "adjacent"))
        _choice("sweep.outer_optimizer", self.outer_optimizer, ("adam", "sgd"))


@dataclass(frozen=True)
class Theorem1Config:
    q_grid: tuple[float, ...] = (0.2, 0.5, 0.8)
    n_grid: tuple[int | str, ...] = (50, 500, "population")
    resamples: int = 200
    mu_i: float = 1.0
    mu_j: float = 1.0
    sd_i: float = 1.0
    sd_j: float = 1.0
    width_i: int = 2
    width_j: int = 2

    def __post_init__(self):
        if not self.q_grid or not self.n_grid:
            raise ConfigError("theorem1 grids must be non-empty")
        for q in self.q_grid:
            if not 0.0 <= q <= 1.0:
                raise ConfigError("theorem1.q_grid values must lie in [0, 1]")
        for n in self.n_grid:
            if n != "population" and (not isinstance(n, int) or n < 1):
                raise ConfigError("theorem1.n_grid entries must be positive ints or 'population'")
        if self.resamples < 1:
            raise ConfigError("theorem1.resamples must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "causal"
    task_kind: str = "regression"
    seed: int = 0
    iterations: int = 10000
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    # "adam" (step size outer_lr) or "sgd"
    outer_optimizer: str = "adam"
    inner_steps: int = 1
    batch_size: int = 4
    first_order: bool = False
    # steps 1 and 2 of a causal iteration see the same sampled batch
    shared_batch: bool = True
    ablate: str = "none"
    eval_tasks: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    causal: CausalHyper = field(default_factory=CausalHyper)
    sinusoid: SinusoidSpec = field(default_factory=SinusoidSpec)
    world: FactorWorldSpec = field(default_factory=FactorWorldSpec)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    theorem1: Theorem1Config = field(default_factory=Theorem1Config)

    def __post_init__(self):
        _choice("mode", self.mode, MODES)
        _choice("task_kind", self.task_kind, TASK_KINDS)
        _choice("ablate", self.ablate, ABLATIONS)
        _choice("outer_optimizer", self.outer_optimizer, ("adam", "sgd"))
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size (N_tr) must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations (budget) must be >= 1")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.eval_tasks < 1:
            raise ConfigError("eval_tasks must be >= 1")

    @property
    def effective_causal(self) -> CausalHyper:
        """Causal hyperparameters with the ablation switches applied."""
        c = self.causal
        if self.ablate in ("xi", "both"):
            c = dataclasses.replace(c, lambda1=0.0)
        if self.ablate in ("fgr", "both"):
            c = dataclasses.replace(c, lambda2=0.0)
        return c

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _choice(path: str, value, allowed) -> None:
    if value not in allowed:
        raise ConfigError(f"{path} must be one of {list(allowed)}, got {value!r}")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


# ------------------------------------------------------------------ parsing

def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _convert(arg, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{path}: must be finite")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(f"unknown key {full!r}")
        kwargs[key] = _convert(hints[key], value, full)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and not str(exc).startswith(path):
            raise ConfigError(f"{path}: {exc}") from None
        raise
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def parse_config(source: str | os.PathLike | dict | None = None) -> ExperimentConfig:
    """Build a validated config from a path, inline YAML text, or a mapping."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        text = str(source)
        if isinstance(source, os.PathLike) or ("\n" not in text and os.path.isfile(text)):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
    return _build(ExperimentConfig, data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
