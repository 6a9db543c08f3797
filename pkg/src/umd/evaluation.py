"""Representation probing and a classifier-based sample fidelity check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ImageDataset
from .exceptions import ConfigError
from .model import UMDModel
from .patching import patchify
from .schedules import BetaSchedule, forward_noise

__all__ = [
    "ProbeResult",
    "extract_representation",
    "fit_linear_probe",
    "predict_linear_probe",
    "few_shot_split",
    "probe_model",
    "OracleClassifier",
    "train_oracle_classifier",
    "conditional_fidelity_check",
    "probe_timestep",
    "sample_fidelity",
]


@dataclass
class ProbeResult:
    accuracy: float
    n_shots: int
    n_classes: int
    ridge_lambda: float

    def summary(self) -> str:
        return (f"probe accuracy={self.accuracy:.4f} shots={self.n_shots} "
                f"classes={self.n_classes} lambda={self.ridge_lambda:g}")


@torch.no_grad()
def extract_representation(model: UMDModel, images: torch.Tensor, t: int = 0,
                           schedule: BetaSchedule | None = None, seed: int = 0,
                           batch_size: int = 512) -> np.ndarray:
    """Encoder CLS features of unmasked images under the null condition.

    With ``t > 0`` the images are first noised to step ``t`` with noise drawn
    from ``seed``, so repeated calls agree.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    c = model.config
    gen = torch.Generator().manual_seed(seed)
    feats = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size].to(dtype)
        tokens = patchify(x, c.patch_size).tokens
        if t > 0:
            if schedule is None:
                raise ValueError("a schedule is needed to noise inputs before encoding")
            eps = torch.randn(tokens.shape, generator=gen, dtype=torch.float64).to(dtype)
            tokens = forward_noise(tokens, t, eps, schedule).x_t
        feats.append(model.representation(tokens, t=t).double().numpy())
    return np.concatenate(feats)


def _design(features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or not np.isfinite(x).all():
        raise ValueError("features must be a finite 2-D array")
    return np.hstack([x, np.ones((x.shape[0], 1))])


def fit_linear_probe(features, labels, ridge_lambda: float = 1e-3, n_classes: int | None = None) -> np.ndarray:
    """Closed-form ridge regression onto one-hot targets.

    Returns weights of shape ``(d + 1, n_classes)``; the last row is an
    unpenalised bias. The penalty is ``ridge_lambda * trace(X^T X) / d``.
    """
    if ridge_lambda <= 0:
        raise ConfigError("ridge_lambda must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    X = _design(features)
    n, d1 = X.shape
    if n < n_classes:
        raise ValueError("need at least as many examples as classes")
    Y = np.eye(n_classes)[labels]
    gram = X.T @ X
    d = d1 - 1
    penalty = ridge_lambda * np.trace(gram[:d, :d]) / max(d, 1)
    reg = np.full(d1, penalty)
    reg[-1] = 0.0
    try:
        return np.linalg.solve(gram + np.diag(reg), X.T @ Y)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("probe system is singular; increase ridge_lambda") from exc


def predict_linear_probe(weights: np.ndarray, features) -> np.ndarray:
    return np.argmax(_design(features) @ weights, axis=1)


def few_shot_split(labels, k: int, seed: int = 0) -> np.ndarray:
    """Indices of ``k`` random examples per class."""
    if k < 1:
        raise ValueError("k_shots must be at least 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c} has only {len(idx)} examples, fewer than k={k}")
        out.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(out))


def probe_model(model: UMDModel, fit_data: ImageDataset, eval_data: ImageDataset, k_shots: int,
                seed: int = 0, ridge_lambda: float = 1e-3, t: int = 0,
                schedule: BetaSchedule | None = None) -> ProbeResult:
    """k-shot ridge probe on CLS features; accuracy on ``eval_data``."""
    idx = few_shot_split(fit_data.labels.numpy(), k_shots, seed)
    n_classes = int(max(fit_data.labels.max(), eval_data.labels.max())) + 1
    f_fit = extract_representation(model, fit_data.images[idx], t, schedule, seed)
    f_eval = extract_representation(model, eval_data.images, t, schedule, seed + 1)
    w = fit_linear_probe(f_fit, fit_data.labels.numpy()[idx], ridge_lambda, n_classes)
    acc = float(np.mean(predict_linear_probe(w, f_eval) == eval_data.labels.numpy()))
    return ProbeResult(acc, k_shots, n_classes, ridge_lambda)


def probe_timestep(objective, noised_t: int = 50) -> int:
    """Timestep at which features are read out.

    Models trained with the clean step are probed on clean inputs. A model
    that never saw t=0 (r_t0 = 0) is probed on inputs noised to ``noised_t``,
    which lies inside its training distribution.
    """
    return 0 if objective.r_t0 > 0 else noised_t


class OracleClassifier:
    """Pixel-space classifier trained on real images, with its held-out accuracy."""

    def __init__(self, estimator, heldout_accuracy: float):
        self.estimator = estimator
        self.heldout_accuracy = heldout_accuracy

    def predict(self, images) -> np.ndarray:
        x = torch.as_tensor(images).reshape(len(images), -1).double().numpy()
        return self.estimator.predict(x)


def train_oracle_classifier(train: ImageDataset, heldout: ImageDataset, seed: int = 0) -> OracleClassifier:
    """RBF support vector machine on raw pixels, scored on ``heldout``."""
    from sklearn.svm import SVC

    clf = SVC(C=10.0, gamma="scale", random_state=seed)
    clf.fit(train.images.reshape(len(train), -1).double().numpy(), train.labels.numpy())
    oracle = OracleClassifier(clf, 0.0)
    oracle.heldout_accuracy = float(np.mean(oracle.predict(heldout.images) == heldout.labels.numpy()))
    return oracle


def conditional_fidelity_check(samples, labels, oracle: OracleClassifier, min_oracle_accuracy: float = 0.95) -> float:
    """Fraction of samples the oracle assigns to their conditioning label."""
    if oracle.heldout_accuracy < min_oracle_accuracy:
        raise ValueError(
            f"oracle held-out accuracy {oracle.heldout_accuracy:.3f} is below "
            f"{min_oracle_accuracy}; fidelity would be meaningless")
    labels = np.asarray(labels)
    return float(np.mean(oracle.predict(samples) == labels))


def sample_fidelity(model: UMDModel, schedule: BetaSchedule, sampler_config, oracle: OracleClassifier,
                    n_per_class: int, seed: int = 0, min_oracle_accuracy: float = 0.95) -> dict:
    """Draw ``n_per_class`` guided samples per class and score them with ``oracle``."""
    from .sampler import ddim_sample

    n_classes = model.config.n_classes
    if n_classes is None:
        raise ConfigError("fidelity needs a class-conditioned model")
    labels = torch.arange(n_classes).repeat_interleave(n_per_class)
    stats: dict = {}
    gen = torch.Generator().manual_seed(seed)
    samples = ddim_sample(model, schedule, sampler_config, labels=labels, generator=gen, stats=stats)
    acc = conditional_fidelity_check(samples, labels.numpy(), oracle, min_oracle_accuracy)
    return {"accuracy": acc, "cfg_scale": sampler_config.cfg_scale, "n_samples": len(labels),
            "samples": samples, "labels": labels, **stats}
