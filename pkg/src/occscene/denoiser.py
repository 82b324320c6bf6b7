"""Noise-prediction network: a small UNet conditioned on timestep, scene tokens and occupancy."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch, UnknownToken
from .mda import MDA
from .synthworld.scene import VOCAB_SIZE


def sinusoidal(t, dim: int, base: float = 10000.0):
    """``[sin(t w_k), cos(t w_k)]`` with ``w_k = base^(-k / (dim/2))``; ``t`` is ``(B,)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, base: float = 10000.0):
        super().__init__()
        self.dim = dim
        self.base = base
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        e = sinusoidal(t, self.dim, self.base).to(self.mlp[0].weight.dtype)
        return self.mlp(e)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with scale/shift modulation from the condition vector."""

    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.mod = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.mod(F.silu(emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class DenoiserNet(nn.Module):
    """Encoder-decoder with two resolution drops and skip connections.

    Frames are processed independently except at the bottleneck, where the
    occupancy-alignment module sees all ``N`` frames of a sample together.
    """

    def __init__(self, image_size=(32, 48), widths=(16, 32, 64), time_dim=64, token_dim=32, groups=8,
                 num_classes=4, frames=4, mda_cfg=None):
        super().__init__()
        if len(widths) != 3:
            raise ValueError("expected three stage widths")
        self.image_size = tuple(image_size)
        self.frames = frames
        w0, w1, w2 = widths
        self.time_embed = TimestepEmbedding(time_dim)
        self.token_table = nn.Embedding(VOCAB_SIZE, token_dim)
        self.token_proj = nn.Linear(token_dim, time_dim, bias=False)

        self.conv_in = nn.Conv2d(3, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, time_dim, groups)
        self.pool0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down1 = ResBlock(w1, w1, time_dim, groups)
        self.pool1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid0 = ResBlock(w2, w2, time_dim, groups)
        self.mda = MDA(w2, num_classes, frames, mda_cfg) if mda_cfg is not None and mda_cfg.enabled else None
        self.mid1 = ResBlock(w2, w2, time_dim, groups)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec1 = ResBlock(2 * w1, w1, time_dim, groups)
        self.up0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.dec0 = ResBlock(2 * w0, w0, time_dim, groups)
        self.norm_out = nn.GroupNorm(min(groups, w0), w0)
        self.conv_out = nn.Conv2d(w0, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def conditioned(self) -> bool:
        return self.mda is not None

    def condition(self, t, tokens):
        return self.time_embed(t) + embed_tokens(self, tokens)

    def forward(self, y_t, t, tokens, occ_logits=None, cams=None):
        """``y_t`` is ``(B, N, 3, H, W)``; returns the noise prediction of the same shape."""
        if y_t.dim() != 5 or y_t.shape[2] != 3 or tuple(y_t.shape[3:]) != self.image_size:
            raise ShapeMismatch(f"expected (B, N, 3, {self.image_size[0]}, {self.image_size[1]}), got {tuple(y_t.shape)}")
        B, N = y_t.shape[:2]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if t.shape[0] != B:
            raise ShapeMismatch(f"{t.shape[0]} timesteps for batch {B}")
        emb = self.condition(t, tokens).repeat_interleave(N, dim=0)

        x = y_t.reshape(B * N, *y_t.shape[2:])
        h0 = self.down0(self.conv_in(x), emb)
        h1 = self.down1(self.pool0(h0), emb)
        m = self.mid0(self.pool1(h1), emb)
        if occ_logits is not None and self.mda is not None:
            if cams is None or cams.shape[:2] != (B, N):
                raise ShapeMismatch("cams must be (B, N, 25) when occupancy conditioning is given")
            lat = m.reshape(B, N, *m.shape[1:]).transpose(1, 2)
            lat = self.mda(lat, occ_logits, cams)
            m = lat.transpose(1, 2).reshape(B * N, *m.shape[1:])
        m = self.mid1(m, emb)
        u1 = self.up1(F.interpolate(m, scale_factor=2, mode="nearest"))
        u1 = self.dec1(torch.cat([u1, h1], 1), emb)
        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(torch.cat([u0, h0], 1), emb)
        out = self.conv_out(F.silu(self.norm_out(u0)))
        return out.reshape(B, N, *out.shape[1:])


def embed_tokens(net: DenoiserNet, tokens):
    """Embedding lookup, mean over the token axis, bias-free affine map to the condition width."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= net.token_table.num_embeddings):
        raise UnknownToken(f"token ids must lie in [0, {net.token_table.num_embeddings})")
    return net.token_proj(net.token_table(tokens).mean(1))


def predict_noise(net: DenoiserNet, y_t, t, tokens, occ_logits=None, cams=None):
    """Noise prediction; a single ``(N, 3, H, W)`` sample is accepted and returned unbatched."""
    if y_t.dim() == 4:
        tokens = torch.as_tensor(tokens).reshape(1, -1)
        occ = None if occ_logits is None else occ_logits.unsqueeze(0)
        cam = None if cams is None else torch.as_tensor(cams).unsqueeze(0)
        return net(y_t.unsqueeze(0), t, tokens, occ, cam)[0]
    return net(y_t, t, tokens, occ_logits, cams)


def build_denoiser(cfg) -> DenoiserNet:
    d = cfg.denoiser
    return DenoiserNet(
        image_size=cfg.world.image_size,
        widths=d.widths,
        time_dim=d.time_dim,
        token_dim=d.token_dim,
        groups=d.groups,
        num_classes=cfg.world.num_classes,
        frames=cfg.world.frames,
        mda_cfg=cfg.mda,
    )


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
