"""Patch stacking of depth-wise occupancy slices and per-frame latent patches."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import ShapeMismatch


def patchify(x, p):
    """(B, C, H, W) -> (B, (H/p)(W/p), C p p), row-major over patches."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ShapeMismatch(f"({H}, {W}) not divisible by patch size {p}")
    x = x.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


def unpatchify(tokens, C, H, W, p):
    B = tokens.shape[0]
    x = tokens.reshape(B, H // p, W // p, C, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, H, W)


def stack_layout(n_frames, depth, hw):
    """Boolean mask over the stacked sequence marking latent positions.

    Each frame contributes ``depth * hw`` occupancy tokens, then ``hw`` latent tokens.
    """
    per_frame = torch.cat([torch.zeros(depth * hw, dtype=torch.bool), torch.ones(hw, dtype=torch.bool)])
    return per_frame.repeat(n_frames)


class PatchStacker(nn.Module):
    def __init__(self, latent_channels, occ_channels, model_dim, patch_size):
        super().__init__()
        p = patch_size
        self.p = p
        self.latent_channels = latent_channels
        self.occ_embed = nn.Linear(occ_channels * p * p, model_dim)
        self.latent_embed = nn.Linear(latent_channels * p * p, model_dim)
        self.unembed = nn.Linear(model_dim, latent_channels * p * p)
        self.type_embed = nn.Parameter(torch.zeros(2, model_dim))

    def occ_tokens(self, view):
        """(B, C_o, D, H, W) -> (B, D * hw, d_m), depth slice by depth slice."""
        B, Co, D, H, W = view.shape
        slices = view.permute(0, 2, 1, 3, 4).reshape(B * D, Co, H, W)
        t = self.occ_embed(patchify(slices, self.p))
        return t.reshape(B, D * t.shape[1], -1) + self.type_embed[0]

    def latent_tokens(self, frame):
        return self.latent_embed(patchify(frame, self.p)) + self.type_embed[1]

    def stack(self, latent, occ_views):
        """Interleave per frame: all occupancy depth slices of view i, then latent frame i."""
        B, C, N, H, W = latent.shape
        if len(occ_views) != N:
            raise ShapeMismatch(f"{len(occ_views)} occupancy views for {N} frames")
        parts = []
        for i, view in enumerate(occ_views):
            if view.shape[-2:] != (H, W):
                raise ShapeMismatch("occupancy view and latent differ spatially")
            parts.append(self.occ_tokens(view))
            parts.append(self.latent_tokens(latent[:, :, i]))
        seq = torch.cat(parts, dim=1)
        D = occ_views[0].shape[2]
        mask = stack_layout(N, D, (H // self.p) * (W // self.p))
        return seq, mask

    def unstack(self, latent_tokens, n_frames, H, W):
        """(B, N * hw, d_m) latent tokens -> (B, C_L, N, H, W)."""
        B = latent_tokens.shape[0]
        hw = (H // self.p) * (W // self.p)
        x = self.unembed(latent_tokens).reshape(B * n_frames, hw, -1)
        x = unpatchify(x, self.latent_channels, H, W, self.p)
        return x.reshape(B, n_frames, self.latent_channels, H, W).permute(0, 2, 1, 3, 4)


def patch_stack(stacker: PatchStacker, latent, occ_views):
    return stacker.stack(latent, occ_views)
