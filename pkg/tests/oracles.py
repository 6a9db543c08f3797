"""Independent reference computations used by several test modules."""

import math

import numpy as np
import torch

from umd.model import ModelConfig, UMDModel


def mae_reference_loss(target, pred, mask):
    """Mean over hidden patches of the per-patch mean squared error (MAE convention)."""
    target, pred, mask = (np.asarray(a, dtype=np.float64) for a in (target, pred, mask))
    per_patch = ((pred - target) ** 2).mean(axis=-1)
    return float((per_patch * mask).sum() / mask.sum())


def dit_reference_loss(eps, eps_pred):
    return float(torch.nn.functional.mse_loss(eps_pred, eps))


def maskdit_reference_loss(x0, x0_pred, eps, eps_pred, mask):
    """Hidden-patch x0 error plus visible-patch epsilon error, looping per example."""
    x0, x0_pred, eps, eps_pred = (np.asarray(a, dtype=np.float64) for a in (x0, x0_pred, eps, eps_pred))
    mask = np.asarray(mask, dtype=bool)
    d = x0.shape[-1]
    sx = sv = 0.0
    nx = nv = 0
    for b in range(x0.shape[0]):
        for i in range(x0.shape[1]):
            if mask[b, i]:
                sx += float(np.sum((x0[b, i] - x0_pred[b, i]) ** 2))
                nx += d
            else:
                sv += float(np.sum((eps[b, i] - eps_pred[b, i]) ** 2))
                nv += d
    return (sx / nx if nx else 0.0) + (sv / nv if nv else 0.0)


def noised_tokens(x0, t, eps, alpha_hats):
    a = np.asarray(alpha_hats)[np.asarray(t)].reshape(-1, 1, 1)
    return np.sqrt(a) * np.asarray(x0) + np.sqrt(1 - a) * np.asarray(eps)


def tiny_model(seed=0, n_classes=None, use_adaln=True, head_mode="dual", std=0.3):
    """Width-8, depth-1, 2x2-patch model in float64 with every weight randomised."""
    torch.manual_seed(seed)
    cfg = ModelConfig(image_size=4, channels=1, patch_size=2, width=8, enc_depth=1, dec_depth=1,
                      n_heads=2, time_embed_dim=8, n_classes=n_classes, use_adaln=use_adaln,
                      head_mode=head_mode)
    model = UMDModel(cfg).double()
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(std * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return model


def finite_difference_check(loss_fn, params, h=1e-6):
    """Max over tensors of the norm-wise relative error between autograd and
    central differences. Returns ``(max_error, per_tensor)``."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    per_tensor = {}
    with torch.no_grad():
        for name, p in params.items():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            analytic = p.grad
            scale = max(float(analytic.norm()), float(numeric.norm()))
            diff = float((analytic - numeric).norm())
            per_tensor[name] = diff / scale if scale > 1e-9 else diff
    return max(per_tensor.values()), per_tensor


def gaussian_eps_oracle(mu, alpha_hats):
    """Exact posterior-mean noise predictor when data ~ N(mu, I)."""
    mu = torch.as_tensor(mu, dtype=torch.float64)

    def predict(x_t, t, y=None):
        a = float(alpha_hats[t])
        return math.sqrt(1 - a) * (x_t - math.sqrt(a) * mu)

    return predict
