"""Input validation for image arrays and label vectors."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.utils.validation import check_array, column_or_1d


def check_images(X, image_shape: tuple | None = None) -> torch.Tensor:
    """Coerce ``X`` to a float32 ``(n, C, H, W)`` tensor.

    Accepts ``(n, C, H, W)``, ``(n, H, W)`` (single channel) or flat
    ``(n, C*H*W)`` rows when ``image_shape`` is given.
    """
    if torch.is_tensor(X):
        X = X.detach().cpu().numpy()
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat image rows need image_shape=(C, H, W)")
        X = X.reshape(len(X), *image_shape)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {X.shape[1:]}")
    if X.shape[-1] != X.shape[-2]:
        raise ValueError("images must be square")
    if np.abs(X).max(initial=0.0) > 1.0 + 1e-6:
        raise ValueError("pixel values must be normalised to [-1, 1]")
    return torch.from_numpy(X.astype(np.float32))


def check_labels(y, n: int) -> torch.Tensor:
    y = column_or_1d(y, warn=True)
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} images")
    if not np.issubdtype(np.asarray(y).dtype, np.integer):
        raise ValueError("labels must be integer class ids")
    if y.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")
    return torch.as_tensor(y, dtype=torch.long)
