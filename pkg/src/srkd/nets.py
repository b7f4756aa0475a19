"""Shared network blocks: residual blocks, attention, time embeddings.

GroupNorm uses 8 groups throughout; the nonlinearity is the smooth
self-gated SiLU.  Residual and attention output projections are
zero-initialized so freshly built networks start as identity-like maps.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

NORM_GROUPS = 8


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def norm_layer(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(NORM_GROUPS, ch)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    """MLP lifting the sinusoidal step embedding to the conditioning width."""

    def __init__(self, base_ch: int, time_dim: int):
        super().__init__()
        self.base_ch = base_ch
        self.mlp = nn.Sequential(
            nn.Linear(base_ch, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.base_ch))


class ResBlock(nn.Module):
    """GroupNorm/SiLU residual block with optional time conditioning.

    shortcut: "conv1" (1x1 projection) or "conv3" (3x3 projection) when the
    channel count changes.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None,
                 shortcut: str = "conv1"):
        super().__init__()
        self.norm1 = norm_layer(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = norm_layer(out_ch)
        self.conv2 = zero_module(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        if in_ch == out_ch:
            self.skip = nn.Identity()
        elif shortcut == "conv1":
            self.skip = nn.Conv2d(in_ch, out_ch, 1)
        elif shortcut == "conv3":
            self.skip = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        else:
            raise ValueError(f"unknown shortcut kind {shortcut!r}")

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            if emb is None:
                raise ValueError("time-conditioned ResBlock called without an embedding")
            h = h + self.time_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = q.shape
    m = k.shape[1]
    d = c // heads
    q = q.reshape(b, n, heads, d).transpose(1, 2)
    k = k.reshape(b, m, heads, d).transpose(1, 2)
    v = v.reshape(b, m, heads, d).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = attn @ v
    return out.transpose(1, 2).reshape(b, n, c)


class AttentionBlock(nn.Module):
    """Depth-1 spatial transformer: self-attention, optional cross-attention
    onto a context sequence, and a feed-forward, wrapped by 1x1 projections."""

    def __init__(self, ch: int, heads: int = 8, context_dim: int | None = None):
        super().__init__()
        if ch % heads:
            raise ValueError(f"channels {ch} not divisible by heads {heads}")
        self.heads = heads
        self.norm_in = norm_layer(ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln_self = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.self_out = zero_module(nn.Linear(ch, ch))
        self.context_dim = context_dim
        if context_dim is not None:
            self.ln_cross = nn.LayerNorm(ch)
            self.q_cross = nn.Linear(ch, ch)
            self.kv_cross = nn.Linear(context_dim, 2 * ch)
            self.cross_out = zero_module(nn.Linear(ch, ch))
        self.ln_ff = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(),
                                zero_module(nn.Linear(4 * ch, ch)))
        self.proj_out = zero_module(nn.Conv2d(ch, ch, 1))

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        t = self.proj_in(self.norm_in(x)).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.qkv(self.ln_self(t)).chunk(3, dim=-1)
        t = t + self.self_out(_attention(q, k, v, self.heads))
        if self.context_dim is not None:
            if context is None:
                raise ValueError("cross-attention block called without context")
            qc = self.q_cross(self.ln_cross(t))
            kc, vc = self.kv_cross(context).chunk(2, dim=-1)
            t = t + self.cross_out(_attention(qc, kc, vc, self.heads))
        t = t + self.ff(self.ln_ff(t))
        t = t.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(t)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
