"""Pretraining and label finetuning loops.

All randomness in a step (augmentation, branch choice, masks, timesteps,
noise, label dropout) is drawn from a generator seeded by ``(seed, phase,
step)``, and the data order of an epoch from ``(seed, phase, epoch)``. A run
resumed from a checkpoint therefore replays exactly what an uninterrupted run
would have done.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, apply_overrides
from .data import ImageDataset
from .exceptions import ConfigError, NumericalAbort
from .model import ModelConfig, UMDModel
from .objective import LossBreakdown, ObjectiveConfig, plan_batch, umd_loss
from .patching import patchify
from .schedules import make_schedule

__all__ = [
    "augment",
    "lr_at",
    "EMA",
    "Trainer",
    "pretrain",
    "finetune",
    "load_checkpoint",
    "model_from_checkpoint",
    "CHECKPOINT_FORMAT",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "umd-checkpoint/1"
_PHASE_IDS = {"pretrain": 0, "finetune": 1}


def augment(images: torch.Tensor, generator: torch.Generator | None = None, crop_min: float = 0.8,
            crop_max: float = 1.0, hflip: bool = True) -> torch.Tensor:
    """Random square crop covering ``U(crop_min, crop_max)`` of the area, resized
    back to the input size, then a horizontal flip with probability 0.5."""
    b = images.shape[0]
    out = images
    if crop_min < 1.0:
        area = crop_min + (crop_max - crop_min) * torch.rand(b, generator=generator, dtype=torch.float64)
        side = area.sqrt()
        centre = (1 - side).unsqueeze(1) * (2 * torch.rand(b, 2, generator=generator, dtype=torch.float64) - 1)
        theta = torch.zeros(b, 2, 3, dtype=torch.float64)
        theta[:, 0, 0] = side
        theta[:, 1, 1] = side
        theta[:, :, 2] = centre
        grid = F.affine_grid(theta.to(images.dtype), list(images.shape), align_corners=False)
        out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if hflip:
        flip = torch.rand(b, generator=generator) < 0.5
        out = torch.where(flip.view(b, 1, 1, 1), out.flip(-1), out)
    return out


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from zero, then cosine decay to zero at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


_NO_DECAY = ("cls_token", "enc_pos", "dec_pos", "mask_token", "y_embedder")


def param_groups(model: torch.nn.Module, weight_decay: float):
    """Decay only weight matrices; skip biases, norms and embeddings."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name.startswith(_NO_DECAY):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


class EMA:
    """Polyak average ``shadow <- (1 - d) * shadow + d * param`` over parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        if not 0 < decay <= 1:
            raise ValueError("EMA mixing factor must lie in (0, 1]")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module):
        d = self.decay
        for k, p in model.named_parameters():
            self.shadow[k].mul_(1 - d).add_(p.detach(), alpha=d)

    def state_dict(self):
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state):
        self.shadow = {k: v.clone() for k, v in state.items()}

    def copy_to(self, model: torch.nn.Module):
        model.load_state_dict(self.shadow, strict=False)


def _step_generator(seed: int, phase: str, step: int) -> torch.Generator:
    mixed = np.random.SeedSequence([seed, _PHASE_IDS[phase], step]).generate_state(1, np.uint64)[0]
    return torch.Generator().manual_seed(int(mixed) & ((1 << 63) - 1))


def _epoch_order(seed: int, phase: str, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _PHASE_IDS[phase], epoch, 7]).permutation(n)


class Trainer:
    """Owns the model, optimizer, optional EMA shadow and step counter for one phase."""

    def __init__(self, config: RunConfig, model: UMDModel, phase: str = "pretrain",
                 n_examples: int = 0, metrics_path=None):
        self.config = config
        self.model = model
        self.phase = phase
        self.schedule = make_schedule(config.schedule, config.T)
        self.step = 0
        self.n_examples = n_examples
        if phase == "pretrain":
            self.objective = config.objective
            self.batch_size = config.batch_size
            self.epochs = config.epochs
            self.warmup_epochs = config.warmup_epochs
            self.base_lr = config.lr
            o = config.optimizer
            wd, betas = o.weight_decay, (o.beta1, o.beta2)
            self.crop = (config.augment.crop_scale_min, config.augment.crop_scale_max)
            self.label_dropout = None
            self.ema = None
        else:
            ft = config.finetune
            self.objective = ObjectiveConfig(r_t0=ft.r_t0, m_t0=ft.m_t0, m_tge1=ft.m_tge1,
                                             head_mode=config.objective.head_mode,
                                             deterministic_split=config.objective.deterministic_split)
            self.batch_size = ft.batch_size
            self.epochs = ft.epochs
            self.warmup_epochs = ft.warmup_epochs
            self.base_lr = ft.base_lr
            wd, betas = ft.weight_decay, (ft.beta1, ft.beta2)
            self.crop = (ft.crop_scale_min, ft.crop_scale_max)
            self.label_dropout = ft.label_dropout
            self.ema = EMA(model, ft.ema_decay)
        self.optimizer = torch.optim.AdamW(param_groups(model, wd), lr=self.base_lr, betas=betas)
        self.metrics_path = Path(metrics_path) if metrics_path else None
        if self.metrics_path:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        self.history: list[dict] = []

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.n_examples / self.batch_size))

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    def lr(self, step: int | None = None) -> float:
        return lr_at(self.step if step is None else step, self.total_steps, self.warmup_steps, self.base_lr)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = _epoch_order(self.config.seed, self.phase, epoch, self.n_examples)
        return order[k * self.batch_size:(k + 1) * self.batch_size]

    def compute_loss(self, images: torch.Tensor, labels: torch.Tensor | None,
                     generator: torch.Generator) -> tuple[LossBreakdown, dict]:
        """Mixed objective over one batch; returns the loss and step statistics."""
        cfg, mc, obj = self.config, self.model.config, self.objective
        dtype = next(self.model.parameters()).dtype
        x = augment(images.to(dtype), generator, *self.crop, hflip=cfg.augment.hflip)
        tokens = patchify(x, mc.patch_size).tokens
        y = labels if mc.n_classes is not None else None
        plan = plan_batch(obj, self.schedule, tokens.shape, generator, dtype, y,
                          self.label_dropout, self.model.null_class)
        enc_before = self.model.trace.token_steps
        loss = umd_loss(self.model, tokens, plan, self.schedule, obj.head_mode)
        clean = plan.clean
        stats = {"branch_fraction": float(clean.float().mean()),
                 "n_clean": int(clean.sum()),
                 "enc_token_steps": self.model.trace.token_steps - enc_before}
        return loss, stats

    def train_step(self, images: torch.Tensor, labels: torch.Tensor | None = None) -> dict:
        gen = _step_generator(self.config.seed, self.phase, self.step)
        lr = self.lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        loss, stats = self.compute_loss(images, labels, gen)
        if not torch.isfinite(loss.total):
            snapshot = {"step": self.step, "lr": lr, **stats, **loss.as_floats()}
            raise NumericalAbort(f"non-finite loss at step {self.step}", snapshot)
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        if self.ema is not None:
            self.ema.update(self.model)
        record = {"kind": "train", "phase": self.phase, "step": self.step,
                  "epoch": self.step // self.steps_per_epoch, "lr": lr,
                  "grad_norm": float(grad_norm), **loss.as_floats(), **stats}
        self.step += 1
        return record

    def fit(self, data: ImageDataset, max_steps: int | None = None, checkpoint_dir=None) -> "Trainer":
        """Train until ``total_steps`` (or ``max_steps``), logging and checkpointing."""
        if data.images.shape[0] != self.n_examples:
            raise ValueError("dataset size differs from the one this trainer was planned for")
        stop = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
        use_labels = self.phase == "finetune"
        epoch_acc = []
        every = self.config.checkpoint_every
        while self.step < stop:
            idx = torch.as_tensor(self.batch_indices(self.step))
            labels = data.labels[idx] if use_labels else None
            rec = self.train_step(data.images[idx], labels)
            epoch_acc.append(rec)
            if self.step % max(self.config.log_every, 1) == 0:
                self._log(rec)
            if self.step % self.steps_per_epoch == 0 or self.step == stop:
                self._log(self._epoch_summary(epoch_acc))
                epoch_acc = []
            if checkpoint_dir and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"{self.phase}_step{self.step}.pt")
        return self

    def _epoch_summary(self, recs):
        n = sum(r["n_clean"] for r in recs)
        total = sum(len(self.batch_indices(r["step"])) for r in recs)
        return {"kind": "epoch", "phase": self.phase, "epoch": recs[-1]["epoch"], "steps": len(recs),
                "mean_loss": float(np.mean([r["total"] for r in recs])),
                "branch_fraction": n / max(total, 1),
                "enc_token_steps": sum(r["enc_token_steps"] for r in recs)}

    def _log(self, rec):
        self.history.append(rec)
        if rec["kind"] == "epoch":
            log.info("%s epoch %d loss %.4f r_t0 %.3f", rec["phase"], rec["epoch"], rec["mean_loss"],
                     rec["branch_fraction"])
        if self.metrics_path:
            with self.metrics_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "phase": self.phase,
            "config": self.config.to_flat(),
            "model_config": asdict(self.model.config),
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "ema": None if self.ema is None else self.ema.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "n_examples": self.n_examples,
            "rng": {"seed": self.config.seed,
                    "next_step_generator": _step_generator(self.config.seed, self.phase, self.step).get_state()},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path

    @classmethod
    def from_checkpoint(cls, path, metrics_path=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint file or an in-memory ``state()`` dict."""
        ckpt = path if isinstance(path, dict) else load_checkpoint(path)
        config = apply_overrides(RunConfig.desk(), ckpt["config"])
        model = model_from_checkpoint(ckpt, use_ema=False)
        trainer = cls(config, model, ckpt["phase"], ckpt["n_examples"], metrics_path)
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        if trainer.ema is not None and ckpt["ema"] is not None:
            trainer.ema.load_state_dict(ckpt["ema"])
        trainer.step = ckpt["step"]
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return ckpt


def model_from_checkpoint(ckpt: dict, use_ema: bool = True) -> UMDModel:
    """Rebuild the model; EMA weights are preferred when present and requested."""
    model = UMDModel(ModelConfig(**ckpt["model_config"]))
    dtype = torch.float64 if ckpt["config"].get("dtype") == "float64" else torch.float32
    model.to(dtype)
    model.load_state_dict(ckpt["model"])
    if use_ema and ckpt.get("ema"):
        model.load_state_dict(ckpt["ema"], strict=False)
    return model


def build_model(config: RunConfig) -> UMDModel:
    torch.manual_seed(config.seed)
    model = UMDModel(config.model)
    if config.dtype == "float64":
        model.double()
    return model


def pretrain(config: RunConfig, data: ImageDataset, out_dir=None, max_steps: int | None = None,
             resume=None) -> Trainer:
    """Self-supervised training on unlabeled images.

    Writes ``pretrain.pt`` and ``metrics.jsonl`` under ``out_dir`` when given.
    """
    metrics = Path(out_dir) / "metrics.jsonl" if out_dir else None
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, metrics)
    else:
        if config.model.n_classes is not None:
            config = apply_overrides(config, {"model.n_classes": None})
        trainer = Trainer(config, build_model(config), "pretrain", len(data), metrics)
    trainer.fit(data, max_steps, checkpoint_dir=out_dir)
    if out_dir:
        trainer.save(Path(out_dir) / "pretrain.pt")
    return trainer


def finetune(checkpoint, config: RunConfig | None, data: ImageDataset, out_dir=None,
             max_steps: int | None = None) -> Trainer:
    """Class-conditional finetuning from a pretrained checkpoint, with label
    dropout to the null class and an EMA shadow for sampling."""
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    if data.labels is None:
        raise ConfigError("finetuning needs labeled data")
    n_classes = data.n_classes
    if config is None:
        config = apply_overrides(RunConfig.desk(), ckpt["config"])
    metrics = Path(out_dir) / "metrics.jsonl" if out_dir else None
    if ckpt["phase"] == "finetune":
        if ckpt["model_config"]["n_classes"] != n_classes:
            raise ConfigError(
                f"label vocabulary of size {n_classes} does not match the model's "
                f"{ckpt['model_config']['n_classes']} classes")
        trainer = Trainer.from_checkpoint(checkpoint, metrics)
    else:
        want = config.model.n_classes
        if want is not None and want != n_classes:
            raise ConfigError(f"config expects {want} classes but the data has {n_classes}")
        pre_cfg = ModelConfig(**{**ckpt["model_config"], "n_classes": None})
        mc = ModelConfig(**{**ckpt["model_config"], "n_classes": n_classes})
        if asdict(pre_cfg) != {**asdict(config.model), "n_classes": None}:
            config = apply_overrides(config, {f"model.{k}": v for k, v in asdict(pre_cfg).items()})
        config = apply_overrides(config, {"model.n_classes": n_classes})
        torch.manual_seed(config.seed + 1)
        model = UMDModel(mc)
        if config.dtype == "float64":
            model.double()
        missing, unexpected = model.load_state_dict(ckpt["model"], strict=False)
        if unexpected or set(missing) - {"y_embedder.weight"}:
            raise ConfigError(f"checkpoint does not fit the model: missing={missing} unexpected={unexpected}")
        trainer = Trainer(config, model, "finetune", len(data), metrics)
    if not bool(((data.labels >= 0) & (data.labels < n_classes)).all()):
        raise ConfigError("labels fall outside the class vocabulary")
    trainer.fit(data, max_steps, checkpoint_dir=out_dir)
    if out_dir:
        trainer.save(Path(out_dir) / "finetune.pt")
    return trainer
