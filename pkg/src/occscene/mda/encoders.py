"""Sequence mixers compared in the encoder ablation, behind one residual block."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from ..errors import ShapeMismatch
from .ssm import BiMamba


class AttentionMixer(nn.Module):
    """Single-head scaled dot-product self-attention over the whole sequence."""

    def __init__(self, d_model: int):
        super().__init__()
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, tokens):
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return attn @ v


class GRUMixer(nn.Module):
    """Forward-only gated recurrent pass, zero initial state."""

    def __init__(self, d_model: int):
        super().__init__()
        self.gru = nn.GRU(d_model, d_model, batch_first=True)

    def forward(self, tokens):
        out, _ = self.gru(tokens)
        return out


def make_mixer(kind: str, d_model: int, state_dim: int = 8, selective: bool = True, chunk: int | None = None) -> nn.Module:
    if kind == "mamba":
        return BiMamba(d_model, state_dim, selective, chunk)
    if kind == "attention":
        return AttentionMixer(d_model)
    if kind == "gru":
        return GRUMixer(d_model)
    raise ValueError(f"unknown encoder kind {kind!r}")


def alt_encoder(tokens, kind: str, mixer: nn.Module | None = None):
    """Run the attention or GRU mixer on ``(L, d)`` or ``(batch, L, d)`` tokens."""
    if kind == "mamba":
        raise ValueError("the mamba path is the SSM scan, not an alternate encoder")
    unbatched = tokens.dim() == 2
    x = tokens.unsqueeze(0) if unbatched else tokens
    if x.dim() != 3:
        raise ShapeMismatch("tokens must be (L, d) or (batch, L, d)")
    mixer = mixer if mixer is not None else make_mixer(kind, x.shape[-1]).to(x.dtype)
    out = mixer(x)
    return out[0] if unbatched else out


class EncoderBlock(nn.Module):
    """``x + out(mixer(norm(x)))`` for any mixer kind."""

    def __init__(self, kind: str, d_model: int, state_dim: int = 8, selective: bool = True, chunk: int | None = None):
        super().__init__()
        self.kind = kind
        self.norm = nn.LayerNorm(d_model)
        self.mixer = make_mixer(kind, d_model, state_dim, selective, chunk)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, tokens):
        return tokens + self.out(self.mixer(self.norm(tokens)))
