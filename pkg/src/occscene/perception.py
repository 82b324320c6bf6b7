"""Image-to-occupancy network, its losses, and IoU metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


@dataclass
class LossWeights:
    lambda_ce: float = 1.0
    lambda_sem: float = 1.0
    lambda_geo: float = 1.0

    def __post_init__(self):
        for v in (self.lambda_ce, self.lambda_sem, self.lambda_geo):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and nonnegative")


def _gn(ch):
    return nn.GroupNorm(min(4, ch), ch)


class PerceptionNet(nn.Module):
    """Strided 2-D encoder, per-pixel lift into depth bins, 3-D decoder to class logits.

    The lift is a 1x1 convolution producing ``lift_channels * D`` values per
    pixel of an ``(H, W)``-resized feature map, reshaped into the voxel grid.
    The feature map is flipped in both image axes first so that image rows
    run bottom-up like the grid's height axis and columns follow world x.
    """

    def __init__(self, grid_dims=(16, 8, 16), image_size=(32, 48), num_classes=4, channels=16, lift_channels=8, zero_init_head=True):
        super().__init__()
        self.grid_dims = tuple(grid_dims)
        self.image_size = tuple(image_size)
        self.num_classes = num_classes
        D, H, W = self.grid_dims
        c = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), _gn(c), nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), _gn(2 * c), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), _gn(2 * c), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), _gn(2 * c), nn.SiLU(),
        )
        self.lift_channels = lift_channels
        self.lift = nn.Conv2d(2 * c, lift_channels * D, 1)
        self.decoder = nn.Sequential(
            nn.Conv3d(lift_channels, c, 3, padding=1), _gn(c), nn.SiLU(),
            nn.Conv3d(c, c, 3, padding=1), _gn(c), nn.SiLU(),
        )
        self.head = nn.Conv3d(c, num_classes, 1)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, *self.image_size):
            raise ShapeMismatch(f"expected (B, 3, {self.image_size[0]}, {self.image_size[1]}), got {tuple(image.shape)}")
        D, H, W = self.grid_dims
        f = self.encoder(image)
        f = F.interpolate(f, size=(H, W), mode="bilinear", align_corners=True)
        f = torch.flip(f, dims=(2, 3))
        v = self.lift(f).reshape(image.shape[0], self.lift_channels, D, H, W)
        return self.head(self.decoder(v))


def predict_occupancy(net: PerceptionNet, image: torch.Tensor) -> torch.Tensor:
    """Voxel logits ``(B, C, D, H, W)``; an unbatched ``(3, H, W)`` image gives ``(C, D, H, W)``."""
    if image.dim() == 3:
        return net(image.unsqueeze(0))[0]
    return net(image)


def _check(logits, gt):
    if logits.dim() != gt.dim() + 1 or logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(gt.shape)}")


def loss_ce(logits, gt, class_weights, per_sample=False):
    """Class-weighted cross entropy averaged over voxels (not over weight mass)."""
    _check(logits, gt)
    w = torch.as_tensor(class_weights, dtype=logits.dtype)
    if w.shape != (logits.shape[1],):
        raise ShapeMismatch("one weight per class required")
    nll = F.cross_entropy(logits, gt.long(), reduction="none")
    weighted = nll * w[gt.long()]
    per = weighted.reshape(weighted.shape[0], -1).mean(1)
    return per if per_sample else per.mean()


def _scal_terms(p, t):
    """Soft precision/recall/specificity per (sample, class); ``p`` and ``t`` are (B, K, V)."""
    pt = (p * t).sum(-1)
    sp = p.sum(-1)
    st = t.sum(-1)
    sn = ((1 - p) * (1 - t)).sum(-1)
    sd = (1 - t).sum(-1)
    one = torch.ones_like(pt)
    P = torch.where(sp > 0, pt / sp.clamp_min(1e-12), one)
    R = torch.where(st > 0, pt / st.clamp_min(1e-12), one)
    S = torch.where(sd > 0, sn / sd.clamp_min(1e-12), one)
    return P, R, S, st > 0


def scal_components(logits, gt, mode="semantic"):
    """Return ``(P, R, S, present)`` tensors of shape (B, K) for the chosen mode."""
    _check(logits, gt)
    B, C = logits.shape[:2]
    probs = logits.softmax(1).reshape(B, C, -1)
    labels = gt.long().reshape(B, -1)
    if mode == "semantic":
        t = F.one_hot(labels, C).permute(0, 2, 1).to(probs.dtype)
        p = probs
    elif mode == "geometric":
        p_occ = 1 - probs[:, 0]
        p = torch.stack([probs[:, 0], p_occ], 1)
        occ = (labels != 0).to(probs.dtype)
        t = torch.stack([1 - occ, occ], 1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _scal_terms(p, t)


def loss_scal(logits, gt, mode="semantic", per_sample=False):
    """Mean over classes present in ``gt`` of ``-(log P + log R + log S) / 3``."""
    P, R, S, present = scal_components(logits, gt, mode)
    eps = 1e-12
    per_class = -(P.clamp_min(eps).log() + R.clamp_min(eps).log() + S.clamp_min(eps).log()) / 3
    mask = present.to(per_class.dtype)
    per = (per_class * mask).sum(1) / mask.sum(1).clamp_min(1)
    return per if per_sample else per.mean()


def perception_loss(logits, gt, class_weights, weights: LossWeights, per_sample=False) -> dict:
    ce = loss_ce(logits, gt, class_weights, per_sample=True)
    sem = loss_scal(logits, gt, "semantic", per_sample=True)
    geo = loss_scal(logits, gt, "geometric", per_sample=True)
    total = weights.lambda_ce * ce + weights.lambda_sem * sem + weights.lambda_geo * geo
    out = {"ce": ce, "sem": sem, "geo": geo, "total": total}
    return out if per_sample else {k: v.mean() for k, v in out.items()}


def class_weights_from_labels(labels, num_classes, lo=0.1, hi=10.0) -> np.ndarray:
    """Clipped inverse class frequency, scaled so a uniform class mix gets weight 1."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    with np.errstate(divide="ignore"):
        w = np.where(freq > 0, 1.0 / (num_classes * freq), hi)
    return np.clip(w, lo, hi)


def _as_labels(x):
    return np.asarray(x.labels if hasattr(x, "labels") else x)


def iou_per_class(pred, gt, num_classes) -> np.ndarray:
    """IoU per class; NaN where the union is empty."""
    p = _as_labels(pred).ravel()
    g = _as_labels(gt).ravel()
    if _as_labels(pred).shape != _as_labels(gt).shape:
        raise ShapeMismatch("prediction and ground truth differ in shape")
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        union = np.count_nonzero((p == c) | (g == c))
        if union:
            out[c] = np.count_nonzero((p == c) & (g == c)) / union
    return out


def miou(pred, gt, ignore_free=True, num_classes=None) -> tuple[np.ndarray, float]:
    if num_classes is None:
        num_classes = getattr(gt, "num_classes", None) or int(max(_as_labels(pred).max(), _as_labels(gt).max())) + 1
    per = iou_per_class(pred, gt, num_classes)
    considered = per[1:] if ignore_free else per
    valid = considered[~np.isnan(considered)]
    return per, float(valid.mean()) if valid.size else float("nan")


def occupancy_iou(pred, gt) -> float:
    """Geometric IoU of the occupied (non-free) voxel sets."""
    p = _as_labels(pred) != 0
    g = _as_labels(gt) != 0
    union = np.count_nonzero(p | g)
    return np.count_nonzero(p & g) / union if union else float("nan")


def dataset_miou(preds, gts, num_classes, ignore_free=True) -> float:
    """mIoU with intersections and unions pooled over a whole split."""
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    for p, g in zip(preds, gts):
        p = _as_labels(p).ravel()
        g = _as_labels(g).ravel()
        for c in range(num_classes):
            inter[c] += np.count_nonzero((p == c) & (g == c))
            union[c] += np.count_nonzero((p == c) | (g == c))
    start = 1 if ignore_free else 0
    valid = union[start:] > 0
    return float((inter[start:][valid] / union[start:][valid]).mean()) if valid.any() else float("nan")
