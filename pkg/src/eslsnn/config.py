"""Run configuration and its flat ``key = value`` file format.

Lists are comma-separated; ``none`` stands for a missing per-layer value
(e.g. ``epsilon = 60, none`` makes the first layer sparse and the second
dense). ``#`` starts a comment. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .topology import EvolutionSchedule, GrowthRule, PruneRule

PRESETS = ("temporal_mlp", "lif_mlp", "tiny_conv")
DATASETS = ("mnist", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    preset: str = "temporal_mlp"
    dataset: str = "mnist"
    data_dir: str = ""
    data_file: str = ""
    train_limit: int = 0
    test_limit: int = 0
    hidden: int = 800

    epochs: int = 30
    batch_size: int = 100
    optimizer: str = "adam"
    lr_schedule: str = "exponential"
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float = 1.0

    alpha: float = 0.3
    t_iter: int = 1000
    t_end: int = 0
    prune_rule: str = "set"
    growth_rule: str = "momentum"
    epsilon: tuple = (60.0, None)
    mask_every_step: bool = True

    seed: int = 0
    validation_fraction: float = 0.1

    weight_reg: float = 1e-2
    init_scale: float = 20.0
    threshold: float = 0.5
    t_late: float = -1.0

    timesteps: int = 2
    tau: float = 0.5
    v_th: float = 1.0
    surrogate_width: float = 1.0
    encoding: str = "analog"
    init_gain: float = 2.0
    dtype: str = "float64"

    syn_classes: int = 2
    syn_per_class: int = 200
    syn_test_per_class: int = 100
    syn_timesteps: int = 4
    syn_height: int = 8
    syn_width: int = 8
    syn_noise: float = 0.02
    syn_seed: int = 0

    log_every: int = 100
    log_wallclock: bool = True

    def __post_init__(self):
        self.epsilon = tuple(None if e is None else float(e) for e in self.epsilon)
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {DATASETS}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("exponential", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.encoding not in ("analog", "bernoulli"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        for e in self.epsilon:
            if e is not None and not (e > 0 and math.isfinite(e)):
                raise ConfigError(f"epsilon values must be positive, got {e}")
        try:
            PruneRule(self.prune_rule)
            GrowthRule(self.growth_rule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.seed < 0 or self.syn_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if self.t_end < 0 or self.t_iter < 1 or self.log_every < 1:
            raise ConfigError("t_iter and log_every must be >= 1, t_end >= 0")

    def schedule(self, iterations_per_epoch: int) -> EvolutionSchedule:
        total = self.epochs * iterations_per_epoch
        t_end = self.t_end or max(self.t_iter, int(0.75 * total))
        return EvolutionSchedule(
            alpha=self.alpha,
            t_iter=self.t_iter,
            t_end=t_end,
            prune_rule=self.prune_rule,
            growth_rule=self.growth_rule,
        )

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr_start
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / self.epochs)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return serialize(self)

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epsilon"] = list(self.epsilon)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "epsilon" in d:
            d["epsilon"] = tuple(d["epsilon"])
        return cls(**d)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: TrainingConfig) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))


def _parse_scalar(kind, text, key):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _field_kind(f):
    ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}[ann]


def parse(text: str) -> TrainingConfig:
    kinds = {f.name: _field_kind(f) for f in fields(TrainingConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if kinds[key] is tuple:
            items = [v.strip() for v in val.split(",") if v.strip()]
            values[key] = tuple(
                None if v.lower() == "none" else _parse_scalar(float, v, key) for v in items
            )
        else:
            values[key] = _parse_scalar(kinds[key], val, key)
    return TrainingConfig(**values)


def load_config(path) -> TrainingConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: TrainingConfig, path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")
