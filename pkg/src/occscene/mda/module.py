"""The full dual-alignment conditioning module."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import ShapeMismatch
from .deform import CameraEncoder, DeformableSampler, OccupancyEmbedding
from .encoders import EncoderBlock
from .stack import PatchStacker, patchify


def _conv3d_stack(channels):
    return nn.Sequential(
        nn.Conv3d(channels, channels, 3, padding=1),
        nn.SiLU(),
        nn.Conv3d(channels, channels, 3, padding=1),
    )


class MDA(nn.Module):
    """Occupancy-to-latent alignment with a zero-initialized residual output.

    ``forward(latent, occ_logits, cams)`` takes the latent ``(B, C_L, N, H_L, W_L)``,
    key-frame occupancy logits ``(B, C, D, H_occ, W_occ)`` and flat cameras
    ``(B, N, 25)``, and returns ``latent + zero_conv(mixed)``.
    """

    def __init__(self, latent_channels: int, num_classes: int, max_views: int, cfg):
        super().__init__()
        self.cfg = cfg
        co = cfg.occ_channels
        self.occ_embedding = OccupancyEmbedding(num_classes, co)
        self.camera_encoder = CameraEncoder(co)
        self.samplers = nn.ModuleList(DeformableSampler(co, cfg.sample_points) for _ in range(max_views))
        self.stacker = PatchStacker(latent_channels, co, cfg.model_dim, cfg.patch_size)
        self.encoder = EncoderBlock(cfg.encoder, cfg.model_dim, cfg.state_dim, cfg.selective, cfg.chunk)
        if cfg.scan == "depth-only-off":
            self.occ_conv = _conv3d_stack(co)
        elif cfg.scan == "temporal-only-off":
            self.latent_conv = _conv3d_stack(latent_channels)
        self.zero_conv = nn.Conv3d(latent_channels, latent_channels, 1)
        nn.init.zeros_(self.zero_conv.weight)
        nn.init.zeros_(self.zero_conv.bias)

    def occupancy_views(self, occ_logits, cams, size_hw):
        B, N = cams.shape[:2]
        if N > len(self.samplers):
            raise ShapeMismatch(f"{N} views but only {len(self.samplers)} samplers")
        feats = self.occ_embedding(occ_logits, size_hw)
        views = []
        for i in range(N):
            gate = self.camera_encoder(cams[:, i], feats.shape[2:])
            views.append(self.samplers[i](feats, gate))
        return views

    def mixed_latent(self, latent, occ_logits, cams):
        B, C, N, H, W = latent.shape
        if cams.shape[:2] != (B, N) or cams.shape[-1] != 25:
            raise ShapeMismatch(f"cams must be ({B}, {N}, 25), got {tuple(cams.shape)}")
        views = self.occupancy_views(occ_logits, cams, (H, W))
        st = self.stacker
        scan = self.cfg.scan
        if scan == "depth+temporal":
            seq, mask = st.stack(latent, views)
            lat = self.encoder(seq)[:, mask]
        elif scan == "depth-only-off":
            # latent-only scan; occupancy handled by 3-D convolutions and added per frame
            frames = []
            for i, v in enumerate(views):
                occ = self.occ_conv(v).mean(2)
                frames.append(st.latent_tokens(latent[:, :, i]) + st.occ_embed(patchify(occ, st.p)))
            lat = self.encoder(torch.cat(frames, 1))
        else:
            # occupancy-only scan; latent handled by 3-D convolutions over (N, H, W)
            occ_seq = torch.cat([st.occ_tokens(v) for v in views], 1)
            mixed = self.encoder(occ_seq)
            D = views[0].shape[2]
            hw = (H // st.p) * (W // st.p)
            pooled = mixed.reshape(B, N, D, hw, -1).mean(2).reshape(B, N * hw, -1)
            conv = self.latent_conv(latent)
            lat = torch.cat([st.latent_tokens(conv[:, :, i]) for i in range(N)], 1) + pooled
        return st.unstack(lat, N, H, W)

    def forward(self, latent, occ_logits, cams):
        return latent + self.zero_conv(self.mixed_latent(latent, occ_logits, cams))


def mda_forward(module: MDA, latent, occ_logits, cams):
    """Unbatched convenience wrapper: latent (C_L, N, H, W), logits (C, D, H, W), cams (N, 25)."""
    if latent.dim() == 4:
        return module(latent.unsqueeze(0), occ_logits.unsqueeze(0), cams.unsqueeze(0))[0]
    return module(latent, occ_logits, cams)
