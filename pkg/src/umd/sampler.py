"""DDIM reverse process with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .exceptions import ConfigError
from .model import UMDModel
from .patching import patchify, unpatchify
from .schedules import BetaSchedule

__all__ = [
    "SamplerConfig",
    "cfg_predict",
    "ddim_sigma",
    "eps_to_x0",
    "x0_to_eps",
    "ddim_step",
    "ddim_timesteps",
    "ModelDenoiser",
    "ddim_sample",
]


@dataclass
class SamplerConfig:
    """DDIM settings. ``clip`` keeps every clean estimate and the output in [-1, 1]."""

    n_steps: int = 125
    eta: float = 1.0
    cfg_scale: float = 1.5
    predict_mode: str = "epsilon"
    clip: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")
        if self.predict_mode not in ("epsilon", "x0"):
            raise ValueError(f"predict_mode must be 'epsilon' or 'x0', got {self.predict_mode!r}")

    def to_dict(self):
        return asdict(self)


def cfg_predict(eps_cond: torch.Tensor, eps_null: torch.Tensor, s: float) -> torch.Tensor:
    """Guided prediction ``eps_null + s * (eps_cond - eps_null)``."""
    if eps_cond.shape != eps_null.shape:
        raise ValueError("conditional and null predictions must share one shape")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_null
    return eps_null + s * (eps_cond - eps_null)


def _alpha(schedule: BetaSchedule, t: int) -> float:
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"timestep {t} outside 0..{schedule.num_steps}")
    return float(schedule.alpha_hats[t])


def ddim_sigma(schedule: BetaSchedule, t: int, t_prev: int, eta: float) -> float:
    """``eta * sqrt((1 - a_prev) / (1 - a_t)) * sqrt(1 - a_t / a_prev)``.

    At ``eta = 1`` and ``t_prev = t - 1`` this is the DDPM posterior standard
    deviation, and ``sigma**2 <= 1 - a_prev`` always holds.
    """
    a_t, a_prev = _alpha(schedule, t), _alpha(schedule, t_prev)
    return eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)


def eps_to_x0(x_t, eps, t: int, schedule: BetaSchedule):
    a_t = _alpha(schedule, t)
    return (x_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)


def x0_to_eps(x0_pred, x_t, t: int, schedule: BetaSchedule):
    """Noise implied by an x0 prediction at step ``t``; undefined at the clean step."""
    a_t = _alpha(schedule, t)
    if a_t >= 1.0:
        raise ValueError(f"x0 -> eps conversion is undefined at t={t} (alpha_hat == 1)")
    return (x_t - math.sqrt(a_t) * x0_pred) / math.sqrt(1 - a_t)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: BetaSchedule, eta: float = 0.0,
              noise=None, return_x0: bool = False, x0_hat=None):
    """One reverse step from ``t`` to ``t_prev``.

    ``x0_hat`` overrides the clean estimate implied by ``eps_hat``; pass it
    together with the matching noise when the estimate has been clamped.
    """
    if not t_prev < t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if t < 1:
        raise ValueError("reverse steps start from a noised timestep (t >= 1)")
    a_prev = _alpha(schedule, t_prev)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    if x0_hat is None:
        x0_hat = eps_to_x0(x_t, eps_hat, t, schedule)
    dir_coef = math.sqrt(max(1 - a_prev - sigma ** 2, 0.0))
    out = math.sqrt(a_prev) * x0_hat + dir_coef * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic step (sigma > 0) needs a noise tensor")
        out = out + sigma * noise
    return (out, x0_hat) if return_x0 else out


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Uniformly strided, strictly decreasing subsequence of ``T..1`` with both endpoints."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in 1..{T}, got {n_steps}")
    if n_steps == 1:
        return [T]
    ts = np.rint(np.linspace(T, 1, n_steps)).astype(int).tolist()
    assert all(a > b for a, b in zip(ts, ts[1:]))
    return ts


class ModelDenoiser:
    """Adapts a :class:`UMDModel` to an image-space noise predictor with guidance.

    Counts model forward passes in ``n_evals``.
    """

    def __init__(self, model: UMDModel, schedule: BetaSchedule, predict_mode: str = "epsilon",
                 cfg_scale: float = 1.0):
        self.model = model
        self.schedule = schedule
        self.cfg_scale = cfg_scale
        mode = model.config.head_mode
        if mode == "x0_only":
            predict_mode = "x0"
        elif mode == "eps_only":
            predict_mode = "epsilon"
        self.predict_mode = predict_mode
        self.n_evals = 0

    def _eps(self, x_t, t, y):
        c = self.model.config
        tokens = patchify(x_t, c.patch_size).tokens
        tt = torch.full((x_t.shape[0],), t, dtype=torch.long, device=x_t.device)
        pred = self.model(tokens, tt, y)
        self.n_evals += 1
        if self.predict_mode == "x0":
            out = x0_to_eps(pred.x0_pred, tokens, t, self.schedule)
        else:
            out = pred.eps_pred
        g = c.grid_size
        return unpatchify(out, g, g, c.patch_size, c.channels)

    def __call__(self, x_t, t: int, y=None):
        if y is None:
            return self._eps(x_t, t, None)
        eps_cond = self._eps(x_t, t, y)
        if self.cfg_scale == 1:
            return eps_cond
        eps_null = self._eps(x_t, t, None)
        return cfg_predict(eps_cond, eps_null, self.cfg_scale)


@torch.no_grad()
def ddim_sample(model: UMDModel | Callable, schedule: BetaSchedule, config: SamplerConfig,
                labels=None, n_samples: int | None = None, generator: torch.Generator | None = None,
                shape: tuple | None = None, x_T: torch.Tensor | None = None,
                stats: dict | None = None, dtype=torch.float32) -> torch.Tensor:
    """Generate a batch by DDIM from pure noise.

    ``model`` is a :class:`UMDModel` or any callable ``(x_t, t, y) -> eps``
    over image-shaped tensors (``shape`` is then required). The final
    transition goes to the clean step, where the output is the x0 estimate.
    """
    if isinstance(model, UMDModel):
        c = model.config
        if labels is not None and c.n_classes is None:
            raise ConfigError("labels given but the model has no class conditioning")
        shape = (c.channels, c.image_size, c.image_size)
        dtype = next(model.parameters()).dtype
        denoiser = ModelDenoiser(model, schedule, config.predict_mode, config.cfg_scale)
    else:
        if shape is None and x_T is None:
            raise ValueError("shape is required when sampling with a bare callable")
        denoiser = model
    if labels is not None:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.dim() == 0:
            labels = labels.expand(n_samples or 1)
        n_samples = labels.shape[0]
    if x_T is None:
        if n_samples is None:
            raise ValueError("n_samples is required without labels or x_T")
        x_T = torch.randn((n_samples, *shape), generator=generator, dtype=torch.float64).to(dtype)
    x = x_T
    ts = ddim_timesteps(schedule.num_steps, config.n_steps)
    pairs = list(zip(ts, ts[1:] + [0]))
    for t, t_prev in pairs:
        eps = denoiser(x, t, labels)
        x0 = None
        if config.clip:
            # Near t = T the clean estimate divides by sqrt(alpha_hat) ~ 5e-5,
            # so small noise errors explode unless it is kept in pixel range.
            x0 = eps_to_x0(x, eps, t, schedule).clamp(-1.0, 1.0)
            eps = x0_to_eps(x0, x, t, schedule)
        eta = config.eta if t_prev > 0 else 0.0
        noise = None
        if eta > 0:
            noise = torch.randn(x.shape, generator=generator, dtype=torch.float64).to(x.dtype)
        x = ddim_step(x, eps, t, t_prev, schedule, eta, noise, x0_hat=x0)
    if config.clip:
        x = x.clamp(-1.0, 1.0)
    if stats is not None:
        stats["timesteps"] = ts
        stats["model_evals"] = getattr(denoiser, "n_evals", None)
    return x
