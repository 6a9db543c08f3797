"""Image corpora normalised to the model's [-1, 1] pixel domain."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

__all__ = ["ImageDataset", "load_digits16", "load_image_folder", "load_dataset", "train_test_split_stratified"]

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".gif", ".tif", ".tiff"}


@dataclass
class ImageDataset:
    images: torch.Tensor  # (n, C, H, W) in [-1, 1]
    labels: torch.Tensor | None
    class_names: list | None = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self) -> int | None:
        if self.labels is None:
            return None
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return ImageDataset(self.images[idx], labels, self.class_names)


def load_digits16(size: int = 16) -> ImageDataset:
    """sklearn's 8x8 handwritten digits, bilinearly resized to ``size`` x ``size``."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.as_tensor(d.images, dtype=torch.float64).unsqueeze(1) / 16.0
    if size != 8:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    x = (x * 2 - 1).clamp(-1, 1).to(torch.float32)
    return ImageDataset(x, torch.as_tensor(d.target, dtype=torch.long), [str(i) for i in range(10)])


def load_image_folder(root, image_size: int, channels: int = 3) -> ImageDataset:
    """Images under ``root``; immediate subdirectories name the classes when present."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    entries = []
    if subdirs:
        for k, d in enumerate(subdirs):
            entries += [(f, k) for f in sorted(d.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
        names = [d.name for d in subdirs]
    else:
        entries = [(f, None) for f in sorted(root.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
        names = None
    if not entries:
        raise FileNotFoundError(f"no images found under {root}")
    mode = "L" if channels == 1 else "RGB"
    arrays = []
    for f, _ in entries:
        with Image.open(f) as im:
            im = im.convert(mode).resize((image_size, image_size), Image.BILINEAR)
            arrays.append(np.asarray(im, dtype=np.float32).reshape(image_size, image_size, channels))
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2) / 127.5 - 1.0
    labels = None if names is None else torch.tensor([k for _, k in entries], dtype=torch.long)
    return ImageDataset(x.contiguous(), labels, names)


def load_dataset(name: str, image_size: int, channels: int) -> ImageDataset:
    """``digits`` or a path to an image directory."""
    if name == "digits":
        if channels != 1:
            raise ValueError("the digits corpus is single-channel")
        return load_digits16(image_size)
    return load_image_folder(name, image_size, channels)


def train_test_split_stratified(labels: torch.Tensor, test_fraction: float = 0.25, seed: int = 0):
    """Deterministic per-class split; returns ``(train_idx, test_idx)`` sorted."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
