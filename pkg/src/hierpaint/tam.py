"""
Tissue-aware attention across the slices of a stack.

Each slice of a (b, c, h, w) feature map is pooled to one token, the b tokens
attend to each other, and the attended tokens are broadcast back over their
slices. A gated convolution then fuses them with the original features. A
zero-initialized projection on the residual branch makes the whole module
the identity at initialization.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError

GATE_BIAS_INIT = 5.0


def pool_slice_tokens(fm: torch.Tensor) -> torch.Tensor:
    """(b, c, h, w) -> (b, c) spatial means.

    Single-precision maps are averaged in double precision, so pooling a
    broadcast token returns that token exactly.
    """
    if fm.dtype in (torch.float32, torch.float16, torch.bfloat16):
        return fm.double().mean(dim=(2, 3)).to(fm.dtype)
    return fm.mean(dim=(2, 3))


def broadcast_tokens(tokens: torch.Tensor, shape) -> torch.Tensor:
    b, c, h, w = shape
    if tuple(tokens.shape) != (b, c):
        raise ConfigurationError(f"tokens of shape {tuple(tokens.shape)} cannot fill a {tuple(shape)} feature map")
    return tokens[:, :, None, None].expand(b, c, h, w)


class CrossSliceAttention(nn.Module):
    """Multi-head self-attention over a sequence of slice tokens.

    No positional encoding is added, so the module is equivariant to
    permutations of the slices.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"{channels} channels are not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def attention_weights(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-head (heads, B, B) row-stochastic attention matrices."""
        q, k = self._split(self.q(tokens)), self._split(self.k(tokens))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return scores.softmax(dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(tokens)
        v = self._split(self.v(tokens))
        mixed = (attn @ v).transpose(0, 1).reshape(tokens.shape)
        return self.out(mixed)

    def _split(self, x):
        # (B, C) -> (heads, B, C // heads)
        return x.reshape(x.shape[0], self.heads, -1).transpose(0, 1)


class GatedConv2d(nn.Module):
    """Free-form gated convolution: feature(x) * sigmoid(gate(x))."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, gate_bias: float = GATE_BIAS_INIT):
        super().__init__()
        pad = kernel_size // 2
        self.feature = nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad)
        self.gate = nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad)
        nn.init.constant_(self.gate.bias, gate_bias)

    def forward(self, x):
        return self.feature(x) * torch.sigmoid(self.gate(x))


class TissueAwareAttention(nn.Module):
    def __init__(self, channels: int, heads: int = 4, gate_bias: float = GATE_BIAS_INIT):
        super().__init__()
        self.attention = CrossSliceAttention(channels, heads)
        self.gated = GatedConv2d(2 * channels, channels, 3, gate_bias)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        tokens = self.attention(pool_slice_tokens(fm))
        fused = torch.cat([fm, broadcast_tokens(tokens, fm.shape)], dim=1)
        return fm + self.proj(self.gated(fused))

