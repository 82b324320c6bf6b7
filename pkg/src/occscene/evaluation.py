"""Generation metrics on frozen random features, MMD, encoder timing, and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median

import numpy as np
import torch
import torch.nn as nn

from .config import Config, apply_overrides
from .errors import InsufficientSamples, NonPsd
from .mda import EncoderBlock

log = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8
CSV_FIELDS = ("variant", "desk_fid", "desk_fvd", "miou", "seconds", "config_hash")


class FeatureExtractor(nn.Module):
    """Randomly initialized, never trained conv stack pooled to a ``d_f`` vector per image.

    This is a stand-in for a pretrained recognition network; distances
    computed on it are proxies and labelled as such in reports.
    """

    proxy = True

    def __init__(self, d_f: int = 16, seed: int = 1234, width: int = 32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.d_f = d_f
        self.seed = seed
        self.convs = nn.ModuleList([
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.Conv2d(width, d_f, 3, stride=1, padding=1),
        ])
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images):
        """``images`` (B, 3, H, W) in [-1, 1] -> (B, d_f) float64."""
        x = images.to(torch.float32)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x.mean((2, 3)).to(torch.float64)

    def clips(self, clips):
        """(B, N, 3, H, W) -> (B, d_f) by mean pooling per-frame features over time."""
        B, N = clips.shape[:2]
        return self(clips.reshape(B * N, *clips.shape[2:])).reshape(B, N, -1).mean(1)


def sqrtm_psd(m) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition; rejects eigenvalues below ``-1e-8``."""
    m = np.asarray(m, dtype=np.float64)
    sym = (m + m.T) / 2
    w, v = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.size and w.min() < -PSD_TOLERANCE * scale:
        raise NonPsd(f"matrix has eigenvalue {w.min():.3e}")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_stats(feats):
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be (n, d)")
    n, d = f.shape
    if n < d + 1:
        raise InsufficientSamples(f"{n} samples for {d}-dimensional features; need at least {d + 1}")
    return f.mean(0), np.cov(f, rowvar=False).reshape(d, d)


def frechet_from_stats(mu1, s1, mu2, s2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})``."""
    r1 = sqrtm_psd(s1)
    cross = sqrtm_psd(r1 @ s2 @ r1)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * np.trace(cross))
    return max(d, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    mu1, s1 = gaussian_stats(feats_a)
    mu2, s2 = gaussian_stats(feats_b)
    return frechet_from_stats(mu1, s1, mu2, s2)


def _frames(x):
    x = torch.as_tensor(x)
    return x.reshape(-1, *x.shape[-3:]) if x.dim() == 5 else x


def desk_fid(generated, reference, extractor: FeatureExtractor) -> float:
    """Fréchet distance of per-image features; clips are flattened into frames."""
    return frechet_distance(extractor(_frames(generated)).numpy(), extractor(_frames(reference)).numpy())


def desk_fvd(generated_clips, reference_clips, extractor: FeatureExtractor) -> float:
    """Fréchet distance of temporally mean-pooled clip features."""
    return frechet_distance(extractor.clips(generated_clips).numpy(), extractor.clips(reference_clips).numpy())


def _sqdist(x, y):
    return np.maximum((x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2 * x @ y.T, 0.0)


def median_bandwidth(x, y) -> float:
    """Median of pairwise squared distances over the pooled set (off-diagonal)."""
    z = np.concatenate([x, y])
    d = _sqdist(z, z)
    off = d[~np.eye(len(z), dtype=bool)]
    m = float(np.median(off))
    return m if m > 0 else 1.0


def mmd_rbf(x, y, bandwidth: float | None = None) -> float:
    """Biased squared MMD with ``k(a, b) = exp(-|a - b|^2 / bandwidth)``."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    h = median_bandwidth(x, y) if bandwidth is None else bandwidth
    kxx = np.exp(-_sqdist(x, x) / h).mean()
    kyy = np.exp(-_sqdist(y, y) / h).mean()
    kxy = np.exp(-_sqdist(x, y) / h).mean()
    return float(kxx + kyy - 2 * kxy)


# ----- encoder timing


def encoder_timing(lengths=(256, 512, 1024), kinds=("mamba", "attention"), d_model=16, state_dim=4, runs=20, seed=0) -> dict:
    """Median forward wall time in seconds per ``(kind, length)``; runs of all kinds are interleaved."""
    torch.manual_seed(seed)
    blocks = {k: EncoderBlock(k, d_model, state_dim).eval() for k in kinds}
    out = {}
    with torch.no_grad():
        for L in lengths:
            x = torch.randn(1, L, d_model)
            times = {k: [] for k in kinds}
            for b in blocks.values():
                b(x)
            for _ in range(runs):
                for k, b in blocks.items():
                    t0 = time.perf_counter()
                    b(x)
                    times[k].append(time.perf_counter() - t0)
            for k in kinds:
                out[(k, L)] = median(times[k])
    return out


# ----- ablation harness

VARIANTS = {
    "full": [],
    "no-jds": ["train.mode=independent"],
    "mode=independent": ["train.mode=independent"],
    "no-mda": ["mda.enabled=false"],
    "encoder=attention": ["mda.encoder=attention"],
    "encoder=gru": ["mda.encoder=gru"],
    "no-mda-d": ["mda.scan=depth-only-off"],
    "no-mda-t": ["mda.scan=temporal-only-off"],
    "steps=20": ["sample.steps=20"],
    "steps=50": ["sample.steps=50"],
    "steps=100": ["sample.steps=100"],
}
DEFAULT_SUITE = ("full", "no-jds", "no-mda", "encoder=attention", "encoder=gru", "no-mda-d", "no-mda-t", "steps=20", "steps=100")


def variant_config(base: Config, variant: str) -> Config:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return apply_overrides(base, VARIANTS[variant])


@dataclass
class AblationReport:
    variant: str
    desk_fid: float
    desk_fvd: float
    miou: float
    seconds: float
    config_hash: str
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("meta")
        return d


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def generate_for_eval(trainer, reference, steps: int, seed: int, count: int, batch: int = 16):
    """Sample ``count`` clips conditioned on the tokens and cameras of ``reference``."""
    outs = []
    for s in range(0, count, batch):
        e = min(count, s + batch)
        y, _ = trainer.sample(reference.tokens[s:e], reference.cams[s:e], steps=steps, seed=seed + s)
        outs.append(y.clamp(-1, 1))
    return torch.cat(outs)


def evaluate_trainer(trainer, reference, steps: int, ecfg) -> dict:
    """desk-FID / desk-FVD against ``reference`` frames and mIoU of the perception model."""
    n = min(ecfg.n_generated, len(reference))
    ref = reference.take(torch.arange(n))
    gen = generate_for_eval(trainer, ref, steps, ecfg.seed, n)
    fx = FeatureExtractor(ecfg.feature_dim, ecfg.seed)
    return {
        "desk_fid": desk_fid(gen, ref.frames, fx),
        "desk_fvd": desk_fvd(gen, ref.frames, fx),
        "miou": trainer.evaluate_miou(reference),
        "generated": gen,
    }


def run_ablation(suite, base: Config, train, val, budget_steps: int | None = None, trainer_factory=None, on_report=None) -> list:
    """Train and evaluate each variant under the same seeds.

    ``train`` and ``val`` are ``Batch`` objects. Variants differing only in
    the number of sampling steps reuse one trained model. ``budget_steps``
    caps the number of training steps per variant.
    """
    from .engine import Trainer, class_weights_from_labels

    reports = []
    cache: dict = {}
    for variant in suite:
        cfg = variant_config(base, variant)
        t0 = time.perf_counter()
        train_cfg = apply_overrides(cfg, [f"sample.steps={base.sample.steps}"])
        key = train_cfg.hash()
        if key not in cache:
            if trainer_factory is not None:
                tr = trainer_factory(train_cfg)
            else:
                cw = class_weights_from_labels(train.labels.numpy(), cfg.world.num_classes,
                                               cfg.perception.class_weight_min, cfg.perception.class_weight_max)
                tr = Trainer(train_cfg, cw)
                tr.fit(train, max_steps=budget_steps)
            cache[key] = tr
        tr = cache[key]
        metrics = evaluate_trainer(tr, val, cfg.sample.steps, cfg.eval)
        rep = AblationReport(variant, metrics["desk_fid"], metrics["desk_fvd"], metrics["miou"],
                             time.perf_counter() - t0, cfg.hash(), {"proxy_features": True, "steps_trained": tr.step})
        reports.append(rep)
        log.info("variant %s: fid %.4f fvd %.4f miou %.4f", variant, rep.desk_fid, rep.desk_fvd, rep.miou)
        if on_report is not None:
            on_report(rep, reports)
    return reports


def ordering_checks(reports) -> dict:
    """Directional checks: desk-FID full <= no-mda <= no-jds."""
    by = {r.variant: r for r in reports}
    checks = {}
    if "full" in by and "no-mda" in by:
        checks["fid full <= no-mda"] = by["full"].desk_fid <= by["no-mda"].desk_fid
    jds = by.get("no-jds") or by.get("mode=independent")
    if "no-mda" in by and jds is not None:
        checks["fid no-mda <= no-jds"] = by["no-mda"].desk_fid <= jds.desk_fid
    return checks
