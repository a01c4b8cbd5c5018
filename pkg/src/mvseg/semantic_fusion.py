"""Transformer head turning per-sample base features into semantic attributes.

Per ray, an encoder self-attends over the n sample tokens; a decoder then
cross-attends from those tokens to a single memory token, the projected
foundation feature of the ray's pixel. The encoder and decoder outputs are
summed and projected to L class logits per sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class FusionConfig:
    semantic_dim: int  # L
    base_feature_dim: int = 256
    prior_dim: int = 256  # foundation feature D
    model_dim: int = 64
    head_count: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    feedforward_dim: int = 128
    depth_encoding: bool = True
    depth_encoding_scale: float = 16.0
    use_prior: bool = True

    def __post_init__(self):
        for name in ("semantic_dim", "base_feature_dim", "prior_dim", "model_dim", "head_count", "feedforward_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"FusionConfig.{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.model_dim % self.head_count:
            raise ValueError("model_dim must be divisible by head_count")

    def to_dict(self) -> dict:
        return asdict(self)


def depth_encoding(depths: torch.Tensor, dim: int, scale: float) -> torch.Tensor:
    """Sinusoidal encoding of sample depth, (..., n) -> (..., n, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=depths.dtype) / max(half, 1))
    angles = depths[..., None] * scale * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        x = self.norm1(x + self.self_attn(x, x, x, need_weights=False)[0])
        return self.norm2(x + self.ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, memory, use_prior: bool = True, return_attn: bool = False):
        x = self.norm1(x + self.self_attn(x, x, x, need_weights=False)[0])
        attn = None
        if use_prior:
            injected, attn = self.cross_attn(x, memory, memory, need_weights=return_attn)
        else:
            injected = torch.zeros_like(x)
        x = self.norm2(x + injected)
        x = self.norm3(x + self.ff(x))
        return (x, attn) if return_attn else x


class SemanticFusionHead(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.input_proj = nn.Linear(config.base_feature_dim, d)
        self.prior_proj = nn.Linear(config.prior_dim, d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.head_count, config.feedforward_dim) for _ in range(config.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.head_count, config.feedforward_dim) for _ in range(config.decoder_layers)
        )
        self.output_proj = nn.Linear(d, config.semantic_dim)

    def encode(self, base: torch.Tensor, depths: torch.Tensor | None = None) -> torch.Tensor:
        """(R, n, base_dim) -> s: (R, n, model_dim)."""
        if base.shape[-2] == 0:
            raise ValueError("cannot encode an empty sample sequence")
        x = self.input_proj(base)
        if self.config.depth_encoding and depths is not None:
            x = x + depth_encoding(depths.to(x.dtype), self.config.model_dim, self.config.depth_encoding_scale)
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, s: torch.Tensor, pixel_feature: torch.Tensor) -> torch.Tensor:
        """s: (R, n, model_dim), pixel_feature: (R, prior_dim) -> s1: (R, n, model_dim)."""
        if pixel_feature.shape[-1] != self.config.prior_dim:
            raise ValueError(f"pixel feature dim {pixel_feature.shape[-1]} != prior_dim {self.config.prior_dim}")
        if s.shape[-1] != self.config.model_dim:
            raise ValueError(f"sequence dim {s.shape[-1]} != model_dim {self.config.model_dim}")
        memory = self.prior_proj(pixel_feature.to(s.dtype))[..., None, :]  # one memory token per ray
        x = s
        for layer in self.decoder:
            x = layer(x, memory, use_prior=self.config.use_prior)
        return x

    def fuse(self, s: torch.Tensor, s1: torch.Tensor) -> torch.Tensor:
        """Residual sum then projection to L class logits."""
        if s.shape != s1.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(s1.shape)}")
        return self.output_proj(s + s1)

    def forward(self, base, pixel_feature, depths=None) -> torch.Tensor:
        s = self.encode(base, depths)
        return self.fuse(s, self.decode(s, pixel_feature))

    def zero_cross_attention(self) -> "SemanticFusionHead":
        """Zero every cross-attention output projection, removing the prior's effect."""
        with torch.no_grad():
            for layer in self.decoder:
                layer.cross_attn.out_proj.weight.zero_()
                layer.cross_attn.out_proj.bias.zero_()
        return self


def encode_samples(base, head: SemanticFusionHead, depths=None):
    return head.encode(torch.as_tensor(base), depths)


def decode_with_prior(s, pixel_feature, head: SemanticFusionHead):
    return head.decode(torch.as_tensor(s), torch.as_tensor(pixel_feature))


def fuse(s, s1, head: SemanticFusionHead):
    return head.fuse(torch.as_tensor(s), torch.as_tensor(s1))
