"""Camera-aware occupancy encoding: class embedding, camera gates, deformable sampling."""

from __future__ import annotations

import itertools

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeMismatch, ViewIndexOutOfRange

CAMERA_DIM = 25
GATE_SEED_EXTENT = 4
# intrinsic entries are pixel-valued; scale them to O(1) before the FC layer
_INTRINSIC_SCALE = 1.0 / 64.0


def cube_corner_offsets(k: int = 8) -> np.ndarray:
    """First ``k`` unit-cube corners in (d, h, w) order; ``k=1`` gives the origin."""
    corners = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
    if not 1 <= k <= 8:
        raise ValueError("between 1 and 8 cube corners")
    return corners[:k]


class OccupancyEmbedding(nn.Module):
    """Softmax over classes, 1x1x1 class embedding, then resize (H, W) to the latent grid."""

    def __init__(self, num_classes: int, out_channels: int):
        super().__init__()
        self.embed = nn.Conv3d(num_classes, out_channels, 1)

    def forward(self, logits, size_hw):
        if logits.dim() != 5:
            raise ShapeMismatch("occupancy logits must be (B, C, D, H, W)")
        f = self.embed(logits.softmax(1))
        D = f.shape[2]
        if tuple(f.shape[3:]) == tuple(size_hw):
            return f
        return F.interpolate(f, size=(D, *size_hw), mode="trilinear", align_corners=True)


def occ_to_features(embedding: OccupancyEmbedding, grid_logits, size_hw):
    unbatched = grid_logits.dim() == 4
    x = grid_logits.unsqueeze(0) if unbatched else grid_logits
    out = embedding(x, size_hw)
    return out[0] if unbatched else out


class CameraEncoder(nn.Module):
    """``sigmoid(Conv(Reshape(FC(P))))`` upsampled to the feature volume."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fc = nn.Linear(CAMERA_DIM, channels * GATE_SEED_EXTENT**3)
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)
        scale = torch.ones(CAMERA_DIM)
        scale[:9] = _INTRINSIC_SCALE
        self.register_buffer("input_scale", scale, persistent=False)

    def forward(self, flat, size):
        if flat.shape[-1] != CAMERA_DIM:
            raise ShapeMismatch(f"camera vector must have {CAMERA_DIM} entries")
        squeeze = flat.dim() == 1
        flat = flat.reshape(-1, CAMERA_DIM)
        g = self.fc(flat * self.input_scale.to(flat.dtype))
        g = g.reshape(-1, self.channels, GATE_SEED_EXTENT, GATE_SEED_EXTENT, GATE_SEED_EXTENT)
        g = F.interpolate(self.conv(g), size=tuple(size), mode="nearest")
        g = torch.sigmoid(g)
        return g[0] if squeeze else g


def encode_camera(encoder: CameraEncoder, flat, size):
    return encoder(flat, size)


def trilinear_gather(vol, coords):
    """Sample ``vol`` (B, C, D, H, W) at fractional voxel ``coords`` (B, K, 3, D, H, W).

    Coordinates are in (d, h, w) voxel units; corners outside the volume read
    zero. Returns (B, K, C, D, H, W).
    """
    B, C, D, H, W = vol.shape
    K = coords.shape[1]
    if coords.shape != (B, K, 3, D, H, W):
        raise ShapeMismatch(f"coords {tuple(coords.shape)} do not match volume {tuple(vol.shape)}")
    base = torch.floor(coords)
    frac = coords - base
    base = base.long()
    flat = vol.reshape(B, 1, C, D * H * W).expand(B, K, C, D * H * W)
    ext = (D, H, W)
    out = 0
    for corner in itertools.product((0, 1), repeat=3):
        idx = [base[:, :, a] + corner[a] for a in range(3)]
        weight = 1
        valid = torch.ones_like(idx[0], dtype=torch.bool)
        for a in range(3):
            f = frac[:, :, a]
            weight = weight * (f if corner[a] else 1 - f)
            valid &= (idx[a] >= 0) & (idx[a] < ext[a])
        lin = (idx[0].clamp(0, D - 1) * H + idx[1].clamp(0, H - 1)) * W + idx[2].clamp(0, W - 1)
        lin = lin.reshape(B, K, 1, D * H * W).expand(B, K, C, D * H * W)
        vals = torch.gather(flat, 3, lin).reshape(B, K, C, D, H, W)
        out = out + vals * (weight * valid).unsqueeze(2)
    return out


def grid_gather(vol, coords):
    """Same contract as ``trilinear_gather``, evaluated by ``F.grid_sample`` with zero padding."""
    B, C, D, H, W = vol.shape
    K = coords.shape[1]
    if coords.shape != (B, K, 3, D, H, W):
        raise ShapeMismatch(f"coords {tuple(coords.shape)} do not match volume {tuple(vol.shape)}")
    if min(D, H, W) < 2:
        # grid_sample collapses every coordinate of a length-1 axis onto index 0
        return trilinear_gather(vol, coords)
    # voxel (d, h, w) -> normalized (x, y, z) with align_corners: -1 at index 0, +1 at the last index
    ext = torch.tensor([W - 1, H - 1, D - 1], dtype=vol.dtype)
    g = coords.flip(2).permute(0, 1, 3, 4, 5, 2) * (2.0 / ext) - 1
    out = F.grid_sample(vol, g.reshape(B, K * D, H, W, 3), mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.reshape(B, C, K, D, H, W).transpose(1, 2)


class DeformableSampler(nn.Module):
    """Per-location weighted gather at ``p + p_k + dp_k``, then the camera gate.

    A 3x3x3 convolution predicts the offsets ``dp_k`` and the weights ``w_k``;
    it starts at zero offsets and uniform weights ``1/K``.
    """

    def __init__(self, channels: int, points: int = 8, base_offsets=None):
        super().__init__()
        offsets = cube_corner_offsets(points) if base_offsets is None else np.asarray(base_offsets, dtype=np.int64)
        if offsets.shape != (points, 3):
            raise ShapeMismatch("base offsets must be (K, 3)")
        self.points = points
        self.register_buffer("base_offsets", torch.as_tensor(offsets, dtype=torch.float32), persistent=False)
        self.predictor = nn.Conv3d(channels, 4 * points, 3, padding=1)
        nn.init.zeros_(self.predictor.weight)
        nn.init.zeros_(self.predictor.bias)
        with torch.no_grad():
            self.predictor.bias[3 * points :] = 1.0 / points

    def offsets_and_weights(self, x):
        B, _, D, H, W = x.shape
        K = self.points
        pred = self.predictor(x)
        dp = pred[:, : 3 * K].reshape(B, K, 3, D, H, W)
        w = pred[:, 3 * K :].reshape(B, K, 1, D, H, W)
        return dp, w

    def forward(self, x, gate):
        if gate.shape[-4:] != x.shape[-4:]:
            raise ShapeMismatch(f"gate {tuple(gate.shape)} does not match features {tuple(x.shape)}")
        B, _, D, H, W = x.shape
        dp, w = self.offsets_and_weights(x)
        grid = torch.stack(
            torch.meshgrid(
                torch.arange(D, dtype=x.dtype), torch.arange(H, dtype=x.dtype), torch.arange(W, dtype=x.dtype), indexing="ij"
            )
        )
        coords = grid + self.base_offsets.to(x.dtype).reshape(1, -1, 3, 1, 1, 1) + dp
        samples = grid_gather(x, coords)
        return (w * samples).sum(1) * gate


def deform_sample(features, samplers, view: int, gate):
    """Run the sampler owned by ``view``; each view has its own parameters."""
    if not 0 <= view < len(samplers):
        raise ViewIndexOutOfRange(f"view {view} outside [0, {len(samplers)})")
    return samplers[view](features, gate)
