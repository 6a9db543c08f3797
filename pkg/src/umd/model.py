"""Asymmetric encoder-decoder transformer with AdaLN-zero conditioning.

The encoder sees only visible patch tokens plus a CLS token; the decoder sees
the full sequence (mask tokens in hidden slots) and emits x0 and/or epsilon
predictions per patch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .patching import MaskSpec, gather_visible, scatter_full

__all__ = [
    "HEAD_MODES",
    "ModelConfig",
    "DualPrediction",
    "timestep_embedding",
    "modulate",
    "TimestepEmbedder",
    "AdaLNModulation",
    "Block",
    "UMDModel",
]

HEAD_MODES = ("dual", "x0_only", "eps_only")


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    width: int = 128
    enc_depth: int = 6
    dec_depth: int = 2
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int | None = None
    time_embed_dim: int = 256
    use_adaln: bool = True
    head_mode: str = "dual"

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} is not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.n_classes is not None and self.n_classes < 1:
            raise ValueError("n_classes must be positive or None")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


class DualPrediction(NamedTuple):
    """x0 and epsilon predictions for every patch; a head absent in an ablation is None."""

    x0_pred: torch.Tensor | None
    eps_pred: torch.Tensor | None


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features ``[sin(t * f_k), cos(t * f_k)]`` with geometric ``f_k``.

    ``f_k = max_period ** (-k / (dim/2))`` for ``k = 0..dim/2-1``.
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t)
    if bool((t < 0).any()):
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float64
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(dtype if dtype.is_floating_point else torch.float32)


def modulate(h: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    return h * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    """Frequency features followed by a two-layer SiLU MLP."""

    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.freq_dim).to(dtype))


class AdaLNModulation(nn.Module):
    """SiLU then a zero-initialised linear map from the condition to ``n`` width-sized chunks."""

    def __init__(self, width: int, n_chunks: int = 6):
        super().__init__()
        self.width = width
        self.n_chunks = n_chunks
        self.proj = nn.Linear(width, n_chunks * width)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, ...]:
        if cond.shape[-1] != self.width:
            raise ValueError(f"condition has size {cond.shape[-1]}, expected {self.width}")
        return self.proj(F.silu(cond)).chunk(self.n_chunks, dim=-1)


class Attention(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Block(nn.Module):
    """Pre-LN transformer block.

    With AdaLN the layer norms carry no affine parameters; scale, shift and a
    residual gate for each sub-block come from the condition vector instead.
    """

    def __init__(self, width: int, n_heads: int, mlp_ratio: float = 4.0, use_adaln: bool = True):
        super().__init__()
        self.use_adaln = use_adaln
        self.norm1 = nn.LayerNorm(width, elementwise_affine=not use_adaln, eps=1e-6)
        self.attn = Attention(width, n_heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=not use_adaln, eps=1e-6)
        self.mlp = Mlp(width, int(width * mlp_ratio))
        self.adaln = AdaLNModulation(width, 6) if use_adaln else None

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        if self.adaln is None:
            x = x + self.attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaln(cond)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), scale_a, shift_a))
        return x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), scale_m, shift_m))


class FinalLayer(nn.Module):
    """Layer norm with scale/shift-only modulation, then the linear prediction head."""

    def __init__(self, width: int, out_dim: int, use_adaln: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=not use_adaln, eps=1e-6)
        self.adaln = AdaLNModulation(width, 2) if use_adaln else None
        self.linear = nn.Linear(width, out_dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x, cond=None):
        h = self.norm(x)
        if self.adaln is not None:
            shift, scale = self.adaln(cond)
            h = modulate(h, scale, shift)
        return self.linear(h)


@dataclass
class EncoderTrace:
    """Sequence lengths seen by encoder self-attention, one entry per forward call."""

    calls: list = field(default_factory=list)

    def record(self, batch: int, length: int):
        self.calls.append((batch, length))

    @property
    def token_steps(self) -> int:
        return sum(b * n for b, n in self.calls)

    def clear(self):
        self.calls.clear()


class UMDModel(nn.Module):
    """Encoder-decoder over patch tokens ``(B, N, patch_dim)``.

    Class labels use index ``n_classes`` for the learned null embedding; pass
    ``y=None`` to condition on the null embedding (or on time alone when the
    model has no class table).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        w = c.width
        self.patch_embed = nn.Linear(c.patch_dim, w)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, w))
        self.enc_pos = nn.Parameter(torch.zeros(1, c.n_patches, w))
        self.t_embedder = TimestepEmbedder(w, c.time_embed_dim)
        self.y_embedder = None
        if c.n_classes is not None:
            self.y_embedder = nn.Embedding(c.n_classes + 1, w)
        self.enc_blocks = nn.ModuleList(
            [Block(w, c.n_heads, c.mlp_ratio, c.use_adaln) for _ in range(c.enc_depth)])
        self.enc_norm = nn.LayerNorm(w, eps=1e-6)

        self.dec_embed = nn.Linear(w, w)
        self.mask_token = nn.Parameter(torch.zeros(w))
        self.dec_pos = nn.Parameter(torch.zeros(1, c.n_patches + 1, w))
        self.dec_blocks = nn.ModuleList(
            [Block(w, c.n_heads, c.mlp_ratio, c.use_adaln) for _ in range(c.dec_depth)])
        out_dim = 2 * c.patch_dim if c.head_mode == "dual" else c.patch_dim
        self.final = FinalLayer(w, out_dim, c.use_adaln)
        self.trace = EncoderTrace()
        self._init_weights()

    def _init_weights(self):
        for name, m in self.named_modules():
            if isinstance(m, nn.Linear) and not name.endswith(("adaln.proj", "final.linear")) \
                    and not name.startswith("t_embedder"):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for p in (self.cls_token, self.enc_pos, self.dec_pos, self.mask_token):
            nn.init.normal_(p, std=0.02)
        if self.y_embedder is not None:
            nn.init.normal_(self.y_embedder.weight, std=0.02)

    @property
    def null_class(self) -> int | None:
        return self.config.n_classes

    def condition(self, t, y=None, batch_size: int | None = None) -> torch.Tensor:
        """Time embedding plus class embedding (null row when ``y`` is None)."""
        t = torch.as_tensor(t, device=self.cls_token.device)
        if t.dim() == 0:
            t = t.expand(batch_size or 1)
        cond = self.t_embedder(t)
        if self.y_embedder is not None:
            if y is None:
                y = torch.full_like(t, self.null_class, dtype=torch.long)
            y = torch.as_tensor(y, dtype=torch.long, device=cond.device)
            if y.dim() == 0:
                y = y.expand(cond.shape[0])
            if bool(((y < 0) | (y > self.null_class)).any()):
                raise ValueError(f"class index out of range 0..{self.null_class}")
            cond = cond + self.y_embedder(y)
        elif y is not None:
            raise ValueError("model has no class embedding; labels are not accepted")
        return cond

    def _prepend_cond(self, x, cond):
        return torch.cat([cond.unsqueeze(1), x], dim=1)

    def encode(self, visible: torch.Tensor, cond: torch.Tensor):
        """Run the encoder on already position-embedded visible tokens.

        Returns ``(latents, cls)``; ``latents`` includes CLS at position 0.
        """
        b = visible.shape[0]
        x = torch.cat([self.cls_token.expand(b, -1, -1), visible], dim=1)
        if not self.config.use_adaln:
            x = self._prepend_cond(x, cond)
        self.trace.record(b, x.shape[1])
        for blk in self.enc_blocks:
            x = blk(x, cond)
        x = self.enc_norm(x)
        if not self.config.use_adaln:
            x = x[:, 1:]
        return x, x[:, 0]

    def decode(self, latents: torch.Tensor, spec: MaskSpec | None, cond: torch.Tensor) -> DualPrediction:
        c = self.config
        x = self.dec_embed(latents)
        cls, rest = x[:, :1], x[:, 1:]
        if spec is not None:
            rest = scatter_full(rest, spec, self.mask_token)
        elif rest.shape[1] != c.n_patches:
            raise ValueError("decoder needs a mask spec unless every patch is visible")
        x = torch.cat([cls, rest], dim=1) + self.dec_pos
        if not c.use_adaln:
            x = self._prepend_cond(x, cond)
        for blk in self.dec_blocks:
            x = blk(x, cond)
        if not c.use_adaln:
            x = x[:, 1:]
        out = self.final(x, cond)[:, 1:]  # drop CLS
        if c.head_mode == "dual":
            x0, eps = out.split(c.patch_dim, dim=-1)
            return DualPrediction(x0, eps)
        if c.head_mode == "x0_only":
            return DualPrediction(out, None)
        return DualPrediction(None, out)

    def embed_visible(self, tokens: torch.Tensor, spec: MaskSpec | None) -> torch.Tensor:
        x = self.patch_embed(tokens) + self.enc_pos
        return x if spec is None else gather_visible(x, spec)

    def forward(self, tokens: torch.Tensor, t, y=None, spec: MaskSpec | None = None) -> DualPrediction:
        """Predict for a batch of (possibly noised) patch tokens.

        ``spec`` hides patches from the encoder; ``None`` keeps every patch.
        """
        c = self.config
        if tokens.dim() != 3 or tokens.shape[1:] != (c.n_patches, c.patch_dim):
            raise ValueError(
                f"expected tokens of shape (B, {c.n_patches}, {c.patch_dim}), got {tuple(tokens.shape)}")
        cond = self.condition(t, y, batch_size=tokens.shape[0])
        latents, _ = self.encode(self.embed_visible(tokens, spec), cond)
        return self.decode(latents, spec, cond)

    def representation(self, tokens: torch.Tensor, t=0, y=None) -> torch.Tensor:
        """CLS features of unmasked inputs."""
        cond = self.condition(t, y, batch_size=tokens.shape[0])
        _, cls = self.encode(self.embed_visible(tokens, None), cond)
        return cls
