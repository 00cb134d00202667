"""Experiment configuration: nested dataclasses parsed strictly from YAML.

Unknown keys and ill-typed values raise ``ConfigError`` naming the dotted key.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataio import DegradeParams
from .errors import ConfigError
from .losses import LossWeights


@dataclass
class DataConfig:
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    patch_size: int = 64
    # crops/degradations repeat every N epochs; None draws fresh ones forever
    epoch_cycle: int | None = 8
    # random flips / 90-degree rotations of training crops
    augment: bool = True
    degrade: DegradeParams = field(default_factory=DegradeParams)


@dataclass
class ScheduleConfig:
    T: int = 15
    eta_min: float = 0.04
    eta_max: float = 0.999
    kappa: float = 2.0
    form: str = "geometric-sqrt"


@dataclass
class ModelConfig:
    codec: str = "linear"
    latent_channels: int = 8
    codec_width: int = 32
    spatial_factor: int = 4
    denoiser_width: int = 32
    disc_width: int = 32
    embed_dim: int = 128
    embed_input_size: int = 64
    embed_seed: int = 0
    embed_weights: str | None = None


@dataclass
class CodecTrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 2e-3


@dataclass
class TeacherConfig:
    iterations: int = 5000
    batch_size: int = 16
    lr: float = 5e-5
    lr_decay: str = "cosine"
    use_wt: bool = False


@dataclass
class DistillConfig:
    iterations: int = 30000
    batch_size: int = 16
    lr_student: float = 5e-5
    lr_disc: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    teacher_single_call: bool = False
    cache_teacher: bool = True


@dataclass
class EvalConfig:
    rho: float = 0.5
    lowpass_frac: float = 0.25
    space: str = "pixel"
    max_images: int | None = None


@dataclass
class TrainConfig:
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    precision: str = "float32"
    deterministic: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    codec_train: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        positive = {
            "data.patch_size": self.data.patch_size,
            "schedule.T": self.schedule.T,
            "codec_train.batch_size": self.codec_train.batch_size,
            "teacher.iterations": self.teacher.iterations,
            "teacher.batch_size": self.teacher.batch_size,
            "distill.iterations": self.distill.iterations,
            "distill.batch_size": self.distill.batch_size,
            "train.checkpoint_every": self.train.checkpoint_every,
            "train.log_every": self.train.log_every,
        }
        for k, v in positive.items():
            if v < 1:
                raise ConfigError(f"{k} must be >= 1, got {v}")
        if self.codec_train.iterations < 0:
            raise ConfigError("codec_train.iterations must be >= 0")
        if self.data.patch_size % self.data.degrade.scale or self.data.patch_size % (4 * self.model.spatial_factor):
            raise ConfigError("data.patch_size must be divisible by degrade.scale and by 4*model.spatial_factor")
        if self.data.epoch_cycle is not None and self.data.epoch_cycle < 1:
            raise ConfigError("data.epoch_cycle must be >= 1 or null")
        if self.train.precision not in ("float32", "float64"):
            raise ConfigError(f"train.precision must be float32 or float64, got {self.train.precision!r}")
        if self.teacher.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"teacher.lr_decay must be cosine or none, got {self.teacher.lr_decay!r}")
        if self.eval.space not in ("pixel", "latent"):
            raise ConfigError(f"eval.space must be pixel or latent, got {self.eval.space!r}")
        if not 0 < self.eval.rho < 1 or not 0 < self.eval.lowpass_frac < 1:
            raise ConfigError("eval.rho and eval.lowpass_frac must lie in (0, 1)")
        if self.model.codec not in ("linear", "conv", "identity"):
            raise ConfigError(f"model.codec must be linear, conv or identity, got {self.model.codec!r}")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{key}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
        return build(tp, value, key)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        item_types = args if (origin is tuple and args and args[-1] is not Ellipsis) else (args[0],) * len(value)
        if len(item_types) != len(value):
            raise ConfigError(f"{key}: expected {len(item_types)} items, got {len(value)}")
        return tuple(_coerce(t, v, f"{key}[{i}]") for i, (t, v) in enumerate(zip(item_types, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key '{prefix + '.' if prefix else ''}{k}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            key = f"{prefix}.{f.name}" if prefix else f.name
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
    data = apply_overrides(data, overrides or [])
    return build(ExperimentConfig, data).validate()


def config_from_dict(d: dict) -> ExperimentConfig:
    return build(ExperimentConfig, d).validate()
