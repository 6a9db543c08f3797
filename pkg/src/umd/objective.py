"""Training losses: mask-gated dual prediction on noised inputs, MAE
reconstruction at the clean step, and per-example branch allocation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .model import HEAD_MODES, DualPrediction
from .patching import MaskSpec, sample_mask
from .schedules import BetaSchedule, forward_noise

__all__ = [
    "ObjectiveConfig",
    "LossBreakdown",
    "masked_mean_sq",
    "noised_step_loss",
    "mae_step_loss",
    "umd_loss_branch",
    "combine_branches",
    "BatchPlan",
    "plan_batch",
    "umd_loss",
    "RECOVERY_PRESETS",
]


@dataclass
class ObjectiveConfig:
    """``r_t0``: probability of the clean branch. ``m_t0`` / ``m_tge1``: mask
    ratios for the clean and noised branches."""

    r_t0: float = 0.5
    m_t0: float = 0.75
    m_tge1: float = 0.375
    head_mode: str = "dual"
    deterministic_split: bool = False

    def __post_init__(self):
        if not 0.0 <= self.r_t0 <= 1.0:
            raise ValueError(f"r_t0 must lie in [0, 1], got {self.r_t0}")
        for name in ("m_t0", "m_tge1"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    def to_dict(self):
        return asdict(self)


# (r_t0, m_t0, m_tge1) that reduce the mixture to known baselines.
RECOVERY_PRESETS = {
    "mae": dict(r_t0=1.0, m_t0=0.75),
    "maskdit": dict(r_t0=0.0, m_tge1=0.5),
    "dit": dict(r_t0=0.0, m_tge1=0.0),
    "umd": dict(r_t0=0.5, m_t0=0.75, m_tge1=0.375),
}


@dataclass
class LossBreakdown:
    total: torch.Tensor
    x0_term: torch.Tensor
    eps_term: torch.Tensor
    mae_term: torch.Tensor
    branch: str

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "x0_term", "eps_term", "mae_term")}


def masked_mean_sq(target: torch.Tensor, pred: torch.Tensor, select: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the patches where ``select`` is True.

    ``select`` broadcasts over the patch dimension; an empty selection yields 0.
    """
    if target.shape != pred.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if select.shape != target.shape[:-1]:
        select = select.expand(target.shape[:-1])
    w = select.to(target.dtype).unsqueeze(-1)
    count = w.sum() * target.shape[-1]
    if count == 0:
        return target.new_zeros(())
    return (w * (target - pred) ** 2).sum() / count


def _check(pred_like, tokens, spec):
    if spec.mask.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"mask covers {spec.mask.shape[-1]} patches, tokens have {tokens.shape[-2]}")
    if pred_like is not None and pred_like.shape != tokens.shape:
        raise ValueError(f"prediction shape {tuple(pred_like.shape)} != token shape {tuple(tokens.shape)}")


def noised_step_loss(pred: DualPrediction, x_0: torch.Tensor, eps: torch.Tensor, spec: MaskSpec,
                     head_mode: str = "dual") -> LossBreakdown:
    """x0 error on hidden patches plus epsilon error on visible patches."""
    if x_0.shape != eps.shape:
        raise ValueError("x_0 and eps must share one shape")
    _check(pred.x0_pred, x_0, spec)
    _check(pred.eps_pred, eps, spec)
    zero = x_0.new_zeros(())
    x0_term = eps_term = zero
    if head_mode in ("dual", "x0_only"):
        x0_term = masked_mean_sq(x_0, pred.x0_pred, spec.mask)
    if head_mode in ("dual", "eps_only"):
        eps_term = masked_mean_sq(eps, pred.eps_pred, ~spec.mask)
    return LossBreakdown(x0_term + eps_term, x0_term, eps_term, zero, "noised")


def mae_step_loss(pred: DualPrediction, x_0: torch.Tensor, spec: MaskSpec) -> LossBreakdown:
    """Clean-input reconstruction error on hidden patches; the epsilon head is unused.

    A single-head eps_only model reuses its one head as the reconstruction here.
    """
    x0_pred = pred.x0_pred if pred.x0_pred is not None else pred.eps_pred
    _check(x0_pred, x_0, spec)
    mae = masked_mean_sq(x_0, x0_pred, spec.mask)
    zero = x_0.new_zeros(())
    return LossBreakdown(mae, zero, zero, mae, "t0")


def umd_loss_branch(generator: torch.Generator | None, cfg: ObjectiveConfig, batch_size: int) -> torch.Tensor:
    """Boolean per-example flags, True for the clean (t = 0) branch.

    Bernoulli(r_t0) per example, or an exact ``round(r_t0 * B)`` split in
    random order when ``cfg.deterministic_split`` is set.
    """
    if cfg.deterministic_split:
        n0 = int(round(cfg.r_t0 * batch_size))
        flags = torch.zeros(batch_size, dtype=torch.bool)
        flags[torch.randperm(batch_size, generator=generator)[:n0]] = True
        return flags
    if cfg.r_t0 >= 1.0:
        return torch.ones(batch_size, dtype=torch.bool)
    if cfg.r_t0 <= 0.0:
        return torch.zeros(batch_size, dtype=torch.bool)
    return torch.rand(batch_size, generator=generator) < cfg.r_t0


def combine_branches(parts: list[tuple[int, LossBreakdown]]) -> LossBreakdown:
    """Example-weighted mean of per-branch losses over one batch."""
    n = sum(k for k, _ in parts)
    if n == 0:
        raise ValueError("empty batch")
    acc = {}
    for field in ("total", "x0_term", "eps_term", "mae_term"):
        acc[field] = sum(k * getattr(lb, field) for k, lb in parts) / n
    branches = {lb.branch for k, lb in parts if k}
    return LossBreakdown(branch="mixed" if len(branches) > 1 else branches.pop(), **acc)


@dataclass
class BatchPlan:
    """Every random choice behind one batch of the mixed objective.

    ``clean`` flags the t = 0 examples; the remaining fields cover the clean
    and noised sub-batches in index order.
    """

    clean: torch.Tensor
    clean_spec: MaskSpec | None
    t: torch.Tensor | None
    eps: torch.Tensor | None
    noised_spec: MaskSpec | None
    labels: torch.Tensor | None = None


def plan_batch(cfg: ObjectiveConfig, schedule: BetaSchedule, token_shape, generator=None,
               dtype=torch.float32, labels=None, label_dropout: float | None = None,
               null_class: int | None = None) -> BatchPlan:
    """Draw branches, masks, timesteps, noise and label dropout for one batch."""
    b, n, d = token_shape
    if labels is not None and label_dropout:
        labels = labels.clone()
        drop = torch.rand(b, generator=generator) < label_dropout
        labels[drop] = null_class
    clean = umd_loss_branch(generator, cfg, b)
    n0 = int(clean.sum())
    clean_spec = sample_mask(n, cfg.m_t0, generator, batch_size=n0) if n0 else None
    t = eps = noised_spec = None
    if n0 < b:
        t = torch.randint(1, schedule.num_steps + 1, (b - n0,), generator=generator)
        eps = torch.randn((b - n0, n, d), generator=generator, dtype=torch.float64).to(dtype)
        noised_spec = sample_mask(n, cfg.m_tge1, generator, batch_size=b - n0)
    return BatchPlan(clean, clean_spec, t, eps, noised_spec, labels)


def umd_loss(model, tokens: torch.Tensor, plan: BatchPlan, schedule: BetaSchedule,
             head_mode: str = "dual") -> LossBreakdown:
    """Mixed objective over a planned batch: MAE loss on the clean sub-batch,
    mask-gated dual loss on the noised one, weighted by example counts."""
    parts = []
    y = plan.labels
    if plan.clean.any():
        idx = plan.clean.nonzero().flatten()
        x0 = tokens[idx]
        pred = model(x0, torch.zeros(len(idx), dtype=torch.long), None if y is None else y[idx],
                     plan.clean_spec)
        parts.append((len(idx), mae_step_loss(pred, x0, plan.clean_spec)))
    if (~plan.clean).any():
        idx = (~plan.clean).nonzero().flatten()
        x0 = tokens[idx]
        x_t = forward_noise(x0, plan.t, plan.eps, schedule).x_t
        pred = model(x_t, plan.t, None if y is None else y[idx], plan.noised_spec)
        parts.append((len(idx), noised_step_loss(pred, x0, plan.eps, plan.noised_spec, head_mode)))
    return combine_branches(parts)
