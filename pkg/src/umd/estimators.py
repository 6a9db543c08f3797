"""scikit-learn style wrappers: a representation learner and a ridge probe."""

from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .config import RunConfig
from .data import ImageDataset
from .evaluation import extract_representation, fit_linear_probe, predict_linear_probe
from .sampler import SamplerConfig, ddim_sample
from .schedules import make_schedule
from .trainer import finetune, pretrain
from .validation import check_images, check_labels

__all__ = ["UnifiedMaskedDiffusion", "LinearProbeClassifier"]


class UnifiedMaskedDiffusion(TransformerMixin, BaseEstimator):
    """Self-supervised masked diffusion auto-encoder.

    ``fit`` pretrains on unlabeled images, ``transform`` returns encoder CLS
    features, ``finetune`` adds class conditioning and ``sample`` generates
    images by guided DDIM. Images are ``(n, C, H, W)`` or ``(n, H, W)`` arrays
    in [-1, 1]. Settings not exposed here come from ``base_config``
    (desk-scale defaults when None).
    """

    def __init__(self, r_t0=0.5, m_t0=0.75, m_tge1=0.375, head_mode="dual", use_adaln=True,
                 patch_size=4, width=128, enc_depth=6, dec_depth=2, n_heads=4, schedule="cosine",
                 T=1000, epochs=150, batch_size=128, base_lr=None, representation_t=None,
                 random_state=0, base_config=None):
        self.r_t0 = r_t0
        self.m_t0 = m_t0
        self.m_tge1 = m_tge1
        self.head_mode = head_mode
        self.use_adaln = use_adaln
        self.patch_size = patch_size
        self.width = width
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.n_heads = n_heads
        self.schedule = schedule
        self.T = T
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.representation_t = representation_t
        self.random_state = random_state
        self.base_config = base_config

    def _run_config(self, image_shape) -> RunConfig:
        base = self.base_config if self.base_config is not None else RunConfig.desk()
        c, h, _ = image_shape
        warmup = min(base.warmup_epochs, 0.05 * self.epochs)
        over = {
            "objective.r_t0": self.r_t0, "objective.m_t0": self.m_t0, "objective.m_tge1": self.m_tge1,
            "objective.head_mode": self.head_mode, "model.head_mode": self.head_mode,
            "model.use_adaln": self.use_adaln, "model.patch_size": self.patch_size,
            "model.width": self.width, "model.enc_depth": self.enc_depth, "model.dec_depth": self.dec_depth,
            "model.n_heads": self.n_heads, "model.image_size": h, "model.channels": c,
            "schedule": self.schedule, "T": self.T, "epochs": self.epochs, "warmup_epochs": warmup,
            "batch_size": self.batch_size, "optimizer.base_lr": self.base_lr, "seed": self.random_state,
        }
        return base.replace(**over)

    def fit(self, X, y=None, max_steps=None):
        """Pretrain on ``X``; ``y`` is ignored."""
        images = check_images(X)
        self.config_ = self._run_config(tuple(images.shape[1:]))
        trainer = pretrain(self.config_, ImageDataset(images, None), max_steps=max_steps)
        self._set_fitted(trainer, images.shape)
        return self

    def _set_fitted(self, trainer, shape):
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.schedule_ = make_schedule(self.config_.schedule, self.config_.T)
        self.image_shape_ = tuple(shape[1:])
        self.n_features_in_ = int(np.prod(self.image_shape_))
        self.history_ = trainer.history

    @property
    def representation_timestep_(self) -> int:
        if self.representation_t is not None:
            return self.representation_t
        return 0 if self.config_.objective.r_t0 > 0 else self.config_.probe.noised_t

    def transform(self, X):
        """CLS features ``(n, width)`` of clean, unmasked images."""
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_shape_)
        return extract_representation(self.model_, images, self.representation_timestep_, self.schedule_,
                                      seed=self.random_state)

    def finetune(self, X, y, max_steps=None):
        """Class-conditional finetuning with label dropout and an EMA shadow."""
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_shape_)
        labels = check_labels(y, len(images))
        self.classes_ = np.unique(labels.numpy())
        if not np.array_equal(self.classes_, np.arange(len(self.classes_))):
            raise ValueError("labels must be contiguous ids 0..k-1")
        data = ImageDataset(images, labels, [str(c) for c in self.classes_])
        trainer = finetune(self.trainer_.state(), self.config_, data, max_steps=max_steps)
        self.config_ = trainer.config
        self._set_fitted(trainer, images.shape)
        self.ema_model_ = self._ema_model()
        return self

    def _ema_model(self):
        model = copy.deepcopy(self.model_)
        self.trainer_.ema.copy_to(model)
        return model.eval()

    def sample(self, labels=None, n_samples=None, n_steps=None, cfg_scale=None, eta=None, random_state=None):
        """Generate images with the EMA weights (raw weights before finetuning)."""
        check_is_fitted(self, "model_")
        sc = self.config_.sampler
        cfg = SamplerConfig(n_steps=n_steps or sc.n_steps, eta=sc.eta if eta is None else eta,
                            cfg_scale=sc.cfg_scale if cfg_scale is None else cfg_scale,
                            predict_mode=sc.predict_mode)
        model = getattr(self, "ema_model_", self.model_)
        gen = torch.Generator().manual_seed(self.random_state if random_state is None else random_state)
        out = ddim_sample(model, self.schedule_, cfg, labels=labels, n_samples=n_samples, generator=gen)
        return out.numpy()


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Closed-form ridge regression onto one-hot targets with argmax readout."""

    def __init__(self, ridge_lambda=1e-3):
        self.ridge_lambda = ridge_lambda

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.coef_ = fit_linear_probe(X, y_idx, self.ridge_lambda, len(self.classes_))
        return self

    def _scores(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return np.hstack([X, np.ones((len(X), 1))]) @ self.coef_

    def decision_function(self, X):
        """Per-class ridge scores; a single margin column for two classes."""
        scores = self._scores(X)
        return scores[:, 1] - scores[:, 0] if scores.shape[1] == 2 else scores

    def predict(self, X):
        scores = self._scores(X)
        return self.classes_[np.argmax(scores, axis=1)]
