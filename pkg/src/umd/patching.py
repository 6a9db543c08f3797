"""Patch tokenisation, exact-count random masks, and the gather/scatter maps
between visible-only encoder inputs and full-length decoder sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "PatchGrid",
    "MaskSpec",
    "patchify",
    "unpatchify",
    "keep_count",
    "sample_mask",
    "gather_visible",
    "scatter_full",
]


@dataclass
class PatchGrid:
    """Row-major flattened patches.

    ``tokens`` has shape ``(..., grid_h * grid_w, patch_size**2 * channels)``;
    each token is laid out as ``(py, px, channel)``.
    """

    tokens: torch.Tensor
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image: torch.Tensor, patch_size: int) -> PatchGrid:
    """Split ``(C, H, W)`` or ``(B, C, H, W)`` images into patch tokens."""
    if image.dim() not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (B, C, H, W) image, got shape {tuple(image.shape)}")
    *lead, c, h, w = image.shape
    p = int(patch_size)
    if p <= 0 or h % p or w % p:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, c, gh, p, gw, p)
    x = x.movedim(-5, -1)  # (..., gh, p, gw, p, c)
    x = x.transpose(-3, -4)  # (..., gh, gw, p, p, c)
    tokens = x.reshape(*lead, gh * gw, p * p * c)
    return PatchGrid(tokens, gh, gw, p, c)


def unpatchify(grid: PatchGrid | torch.Tensor, grid_h: int | None = None, grid_w: int | None = None,
               patch_size: int | None = None, channels: int | None = None) -> torch.Tensor:
    """Inverse of :func:`patchify`. Accepts a ``PatchGrid`` or raw tokens plus geometry."""
    if isinstance(grid, PatchGrid):
        tokens, gh, gw, p, c = grid.tokens, grid.grid_h, grid.grid_w, grid.patch_size, grid.channels
    else:
        tokens, gh, gw, p, c = grid, grid_h, grid_w, patch_size, channels
    *lead, n, d = tokens.shape
    if n != gh * gw or d != p * p * c:
        raise ValueError(f"token shape {(n, d)} inconsistent with grid {gh}x{gw}, patch {p}, channels {c}")
    x = tokens.reshape(*lead, gh, gw, p, p, c)
    x = x.transpose(-3, -4)  # (..., gh, p, gw, p, c)
    x = x.movedim(-1, -5)  # (..., c, gh, p, gw, p)
    return x.reshape(*lead, c, gh * p, gw * p)


@dataclass
class MaskSpec:
    """Per-example patch masks. ``mask`` is True where a patch is hidden.

    ``keep_indices`` lists visible positions in ascending order, shape
    ``(B, n_keep)``; every example in a batch keeps the same number of patches.
    """

    mask: torch.Tensor
    keep_indices: torch.Tensor
    ratio: float

    @property
    def n_patches(self) -> int:
        return self.mask.shape[-1]

    @property
    def n_keep(self) -> int:
        return self.keep_indices.shape[-1]

    @property
    def n_masked(self) -> int:
        return self.n_patches - self.n_keep

    def permute(self, perm: torch.Tensor) -> "MaskSpec":
        """The same mask after reordering patches so new position ``i`` is old ``perm[i]``."""
        mask = self.mask[..., perm]
        keep = torch.stack([torch.nonzero(~row).flatten() for row in mask.reshape(-1, mask.shape[-1])])
        return MaskSpec(mask, keep.reshape(*mask.shape[:-1], -1), self.ratio)

    @classmethod
    def from_mask(cls, mask: torch.Tensor, ratio: float | None = None) -> "MaskSpec":
        """Build a spec from an explicit boolean mask (True = hidden)."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        squeeze = mask.dim() == 1
        m2 = mask.reshape(1, -1) if squeeze else mask
        counts = (~m2).sum(-1)
        if not bool((counts == counts[0]).all()):
            raise ValueError("all examples in a batch must keep the same number of patches")
        keep = torch.stack([torch.nonzero(~row).flatten() for row in m2])
        if ratio is None:
            ratio = float(m2[0].sum()) / m2.shape[-1]
        if squeeze:
            return cls(mask, keep[0], ratio)
        return cls(mask, keep, ratio)


def keep_count(n_patches: int, ratio: float) -> int:
    """Visible patch count: ``floor(n * (1 - ratio))``."""
    # Guard against float error, e.g. 256 * (1 - 0.75) landing just below 64.
    return int(math.floor(n_patches * (1.0 - ratio) + 1e-9))


def sample_mask(n_patches: int, ratio: float, generator: torch.Generator | None = None,
                batch_size: int | None = None, device=None) -> MaskSpec:
    """Uniform exact-count masks by random permutation truncation.

    Returns a 1-D spec when ``batch_size`` is None, otherwise one independent
    mask per example.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if n_patches < 1:
        raise ValueError("n_patches must be positive")
    b = 1 if batch_size is None else int(batch_size)
    n_keep = keep_count(n_patches, ratio)
    noise = torch.rand(b, n_patches, generator=generator, device=device)
    shuffle = torch.argsort(noise, dim=1)
    keep = torch.sort(shuffle[:, :n_keep], dim=1).values
    mask = torch.ones(b, n_patches, dtype=torch.bool, device=device)
    mask.scatter_(1, keep, False)
    if batch_size is None:
        return MaskSpec(mask[0], keep[0], ratio)
    return MaskSpec(mask, keep, ratio)


def _batched(spec: MaskSpec):
    if spec.keep_indices.dim() == 1:
        return spec.keep_indices.unsqueeze(0), spec.mask.unsqueeze(0)
    return spec.keep_indices, spec.mask


def gather_visible(tokens: torch.Tensor | PatchGrid, spec: MaskSpec) -> torch.Tensor:
    """Rows of ``tokens`` at the visible positions, order preserved."""
    if isinstance(tokens, PatchGrid):
        tokens = tokens.tokens
    squeeze = tokens.dim() == 2
    x = tokens.unsqueeze(0) if squeeze else tokens
    keep, mask = _batched(spec)
    if mask.shape[-1] != x.shape[-2] or keep.shape[0] not in (1, x.shape[0]):
        raise ValueError(
            f"mask for {mask.shape[-1]} patches does not fit tokens of shape {tuple(tokens.shape)}"
        )
    keep = keep.expand(x.shape[0], -1)
    out = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out[0] if squeeze else out


def scatter_full(visible: torch.Tensor, spec: MaskSpec, mask_token: torch.Tensor) -> torch.Tensor:
    """Place visible rows back at their positions; every hidden slot gets ``mask_token``."""
    squeeze = visible.dim() == 2
    v = visible.unsqueeze(0) if squeeze else visible
    keep, mask = _batched(spec)
    if v.shape[-2] != keep.shape[-1]:
        raise ValueError(f"{v.shape[-2]} visible rows but the mask keeps {keep.shape[-1]}")
    b, _, d = v.shape
    keep = keep.expand(b, -1)
    n = mask.shape[-1]
    full = mask_token.reshape(1, 1, d).to(v.dtype).expand(b, n, d)
    out = full.scatter(1, keep.unsqueeze(-1).expand(-1, -1, d), v)
    return out[0] if squeeze else out
