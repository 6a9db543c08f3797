"""Run configuration: nested dataclasses serialised as a flat dotted-key YAML file."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .model import ModelConfig
from .objective import ObjectiveConfig
from .sampler import SamplerConfig

__all__ = [
    "OptimizerConfig",
    "AugmentConfig",
    "FinetuneConfig",
    "ProbeConfig",
    "RunConfig",
    "scaled_lr",
    "flatten",
    "load_config",
    "save_config",
    "apply_overrides",
]


def scaled_lr(blr: float, batch_size: int) -> float:
    """Linear scaling rule: ``blr * batch_size / 256``."""
    return blr * batch_size / 256


@dataclass
class OptimizerConfig:
    blr: float = 1.5e-4
    base_lr: float | None = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95


@dataclass
class AugmentConfig:
    crop_scale_min: float = 0.8
    crop_scale_max: float = 1.0
    hflip: bool = True


@dataclass
class FinetuneConfig:
    epochs: int = 50
    warmup_epochs: float = 2.5
    base_lr: float = 1.5e-4
    batch_size: int = 256
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    label_dropout: float = 0.1
    ema_decay: float = 0.00025
    r_t0: float = 0.05
    m_t0: float = 0.75
    m_tge1: float = 0.0
    crop_scale_min: float = 0.95
    crop_scale_max: float = 1.0


@dataclass
class ProbeConfig:
    shots: int = 100
    ridge_lambda: float = 1e-3
    noised_t: int = 50


@dataclass
class RunConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: str = "cosine"
    T: int = 1000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 1024
    epochs: int = 800
    warmup_epochs: float = 40
    grad_clip: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dataset: str = "digits"
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"schedule must be 'cosine' or 'linear', got {self.schedule!r}")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("T, batch_size and epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be non-negative and smaller than epochs")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning rate and grad_clip must be positive")
        if self.model.head_mode != self.objective.head_mode:
            raise ConfigError("model.head_mode and objective.head_mode must agree")
        if not 0 <= self.finetune.label_dropout <= 1 or not 0 < self.finetune.ema_decay <= 1:
            raise ConfigError("finetune.label_dropout must lie in [0, 1] and ema_decay in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def lr(self) -> float:
        if self.optimizer.base_lr is not None:
            return self.optimizer.base_lr
        return scaled_lr(self.optimizer.blr, self.batch_size)

    @classmethod
    def reference(cls) -> "RunConfig":
        """The 64x64 pixel-space recipe (ViT-B/4 encoder, 4-layer decoder)."""
        return cls(model=ModelConfig(image_size=64, channels=3, patch_size=4, width=768,
                                     enc_depth=12, dec_depth=4, n_heads=12),
                   dataset="folder")

    @classmethod
    def desk(cls) -> "RunConfig":
        """Defaults sized for a single CPU on the 16x16 digits corpus."""
        return cls(
            model=ModelConfig(),
            batch_size=128,
            epochs=150,
            warmup_epochs=7.5,
            optimizer=OptimizerConfig(blr=2e-3),
            augment=AugmentConfig(hflip=False),
            finetune=FinetuneConfig(epochs=60, warmup_epochs=3, base_lr=2e-3, batch_size=128,
                                    ema_decay=0.01, crop_scale_min=0.95),
            sampler=SamplerConfig(n_steps=50, eta=1.0, cfg_scale=1.5),
        )

    def to_flat(self) -> dict:
        return flatten(dataclasses.asdict(self))

    def replace(self, **overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if isinstance(value, str) and tp is not str:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
    try:
        if tp is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {value!r} (expected {tp.__name__})") from exc
    return value


def _build(cls, flat: dict, prefix: str, base):
    kwargs = {}
    for name, tp in _field_types(cls).items():
        key = prefix + name
        current = getattr(base, name)
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, flat, key + ".", current)
        elif key in flat:
            kwargs[name] = _coerce(flat[key], tp, key)
        else:
            kwargs[name] = current
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """New config with dotted-key ``overrides`` applied; unknown keys are errors."""
    known = set(config.to_flat())
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    overrides = dict(overrides)
    if "objective.head_mode" in overrides and "model.head_mode" not in overrides:
        overrides["model.head_mode"] = overrides["objective.head_mode"]
    return _build(RunConfig, overrides, "", config)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat YAML mapping of dotted keys on top of ``base`` (desk defaults)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except OSError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    data = flatten(data)
    return apply_overrides(base or RunConfig.desk(), data)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_flat(), sort_keys=False))


def parse_set_args(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
