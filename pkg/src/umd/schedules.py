"""Variance schedules with a prepended no-noise step, and the closed-form forward process.

Every schedule has ``T + 1`` entries. Index 0 is the clean step (``beta == 0``,
``alpha_hat == 1``); indices ``1..T`` hold the usual diffusion schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "BetaSchedule",
    "NoisedSample",
    "make_cosine_schedule",
    "make_linear_schedule",
    "make_schedule",
    "forward_noise",
]


@dataclass(frozen=True)
class BetaSchedule:
    """Per-step variances and their cumulative signal fractions, in float64."""

    betas: np.ndarray
    alpha_hats: np.ndarray
    num_steps: int
    kind: str = "custom"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_hats = np.asarray(self.alpha_hats, dtype=np.float64)
        if betas.shape != (self.num_steps + 1,) or alpha_hats.shape != betas.shape:
            raise ValueError(
                f"schedule arrays must have length num_steps + 1 = {self.num_steps + 1}"
            )
        betas.setflags(write=False)
        alpha_hats.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_hats", alpha_hats)

    @classmethod
    def from_betas(cls, betas, kind="custom"):
        betas = np.asarray(betas, dtype=np.float64)
        return cls(betas, np.cumprod(1.0 - betas), len(betas) - 1, kind)

    @property
    def T(self) -> int:
        return self.num_steps

    def check_timestep(self, t):
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < 0 or t_arr.max() > self.num_steps):
            raise ValueError(f"timestep out of range 0..{self.num_steps}: {t}")

    def sqrt_alpha_hat(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        return self._lookup(np.sqrt(self.alpha_hats), t, like)

    def sqrt_one_minus_alpha_hat(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        return self._lookup(np.sqrt(1.0 - self.alpha_hats), t, like)

    def _lookup(self, table, t, like):
        # Gather in float64, then cast to the consumer's dtype.
        self.check_timestep(t.cpu().numpy() if torch.is_tensor(t) else t)
        values = torch.as_tensor(table, dtype=torch.float64)
        idx = torch.as_tensor(t, dtype=torch.long)
        out = values[idx]
        if like is not None:
            out = out.to(dtype=like.dtype, device=like.device)
            out = out.reshape(out.shape + (1,) * (like.dim() - out.dim()))
        return out


@dataclass(frozen=True)
class NoisedSample:
    x_t: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor | int


def _check_steps(T):
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValueError(f"number of diffusion steps must be a positive integer, got {T!r}")


def make_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> BetaSchedule:
    """Cosine schedule on steps ``1..T`` with a zero-noise step prepended."""
    _check_steps(T)

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    betas = [0.0]
    for t in range(1, T + 1):
        betas.append(min(1.0 - f(t) / f(t - 1), max_beta))
    return BetaSchedule.from_betas(betas, kind="cosine")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> BetaSchedule:
    _check_steps(T)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    return BetaSchedule.from_betas(betas, kind="linear")


def make_schedule(kind: str, T: int) -> BetaSchedule:
    if kind == "cosine":
        return make_cosine_schedule(T)
    if kind == "linear":
        return make_linear_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}; expected 'cosine' or 'linear'")


def forward_noise(x_0: torch.Tensor, t, eps: torch.Tensor, schedule: BetaSchedule) -> NoisedSample:
    """Sample ``x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps`` in closed form.

    ``t`` is an int or a per-example integer tensor aligned with the leading
    dimension of ``x_0``.
    """
    if eps.shape != x_0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match x_0 {tuple(x_0.shape)}")
    if torch.is_tensor(t) and t.dim() == 1 and x_0.dim() >= 1:
        if t.shape[0] != x_0.shape[0]:
            raise ValueError("per-example timesteps must match the batch dimension")
        like = x_0
    else:
        like = None
    a = schedule.sqrt_alpha_hat(t, like=like)
    b = schedule.sqrt_one_minus_alpha_hat(t, like=like)
    if like is None:
        a = a.to(x_0.dtype)
        b = b.to(x_0.dtype)
    return NoisedSample(a * x_0 + b * eps, eps, t)
