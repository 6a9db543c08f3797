"""Unified masked diffusion: one masked, noised auto-encoder for representation
learning and class-conditional generation."""

from .config import RunConfig, load_config
from .estimators import LinearProbeClassifier, UnifiedMaskedDiffusion
from .exceptions import ConfigError, NumericalAbort
from .model import ModelConfig, UMDModel
from .objective import ObjectiveConfig, umd_loss
from .sampler import SamplerConfig, ddim_sample
from .schedules import BetaSchedule, forward_noise, make_schedule
from .trainer import Trainer, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "BetaSchedule",
    "ConfigError",
    "LinearProbeClassifier",
    "ModelConfig",
    "NumericalAbort",
    "ObjectiveConfig",
    "RunConfig",
    "SamplerConfig",
    "Trainer",
    "UMDModel",
    "UnifiedMaskedDiffusion",
    "ddim_sample",
    "finetune",
    "forward_noise",
    "load_config",
    "make_schedule",
    "pretrain",
    "umd_loss",
]
