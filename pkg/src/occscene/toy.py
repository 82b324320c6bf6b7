"""Toy diffusion problem: 8x8 single-channel images from a two-mode distribution.

Used as an end-to-end sanity check of the schedule, the training objective and
the reverse sampler on a problem small enough to train to convergence on CPU.
"""

from __future__ import annotations

import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import sinusoidal
from .numcore import Streams
from .schedule import NoiseSchedule, ddpm_step, make_linear_schedule, q_sample, respace

SIZE = 8


def _patterns():
    a = np.full((SIZE, SIZE), -1.0)
    a[2:6, :] = 1.0  # horizontal band
    b = np.full((SIZE, SIZE), -1.0)
    b[:, 2:6] = 1.0  # vertical band
    return np.stack([a, b])


def two_mode_samples(n: int, rng: np.random.Generator, jitter: float = 0.1) -> np.ndarray:
    """(n, 64) float32: one of two band images (equal odds), random contrast, small pixel noise."""
    pats = _patterns().reshape(2, -1)
    mode = rng.integers(0, 2, n)
    contrast = rng.uniform(0.6, 1.0, (n, 1))
    x = pats[mode] * contrast + jitter * rng.standard_normal((n, SIZE * SIZE))
    return x.astype(np.float32)


class ToyDenoiser(nn.Module):
    """Residual MLP; each block is modulated by a scale and shift from the timestep embedding."""

    def __init__(self, dim: int = SIZE * SIZE, hidden: int = 256, time_dim: int = 64, depth: int = 3):
        super().__init__()
        self.time_dim = time_dim
        self.t_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.inp = nn.Linear(dim, hidden)
        self.norms = nn.ModuleList([nn.LayerNorm(hidden, elementwise_affine=False) for _ in range(depth)])
        self.mods = nn.ModuleList([nn.Linear(hidden, 2 * hidden) for _ in range(depth)])
        self.ffs = nn.ModuleList([nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
                                  for _ in range(depth)])
        self.out = nn.Linear(hidden, dim)

    def forward(self, x, t):
        e = F.silu(self.t_mlp(sinusoidal(t, self.time_dim)))
        h = self.inp(x)
        for norm, mod, ff in zip(self.norms, self.mods, self.ffs):
            scale, shift = mod(e).chunk(2, dim=-1)
            h = h + ff(norm(h) * (1 + scale) + shift)
        return self.out(F.silu(h))


def train_toy(steps: int = 12000, batch: int = 256, lr: float = 2e-3, seed: int = 0, T: int = 1000,
              time_budget: float | None = None):
    """Fit a ``ToyDenoiser``; stops early when ``time_budget`` seconds are used up."""
    streams = Streams(seed)
    torch.manual_seed(streams.int("toy-init"))
    net = ToyDenoiser()
    sched = make_linear_schedule(T)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    data_rng = streams.numpy("toy-data")
    t0 = time.perf_counter()
    done = 0
    for k in range(steps):
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
        g = streams.torch("toy-step", k)
        y0 = torch.from_numpy(two_mode_samples(batch, data_rng))
        t = torch.randint(0, T, (batch,), generator=g)
        eps = torch.randn(y0.shape, generator=g)
        loss = F.mse_loss(net(q_sample(y0, t, eps, sched), t), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        done += 1
    return net, sched, done


@torch.no_grad()
def sample_toy(net: ToyDenoiser, sched: NoiseSchedule, n: int, steps: int = 50, seed: int = 0) -> np.ndarray:
    net.eval()
    sub = respace(sched, steps)
    g = Streams(seed).torch("toy-sample")
    y = torch.randn((n, SIZE * SIZE), generator=g)
    for i in reversed(range(sub.T)):
        t = torch.full((n,), int(sub.timesteps[i]), dtype=torch.long)
        z = torch.randn(y.shape, generator=g) if i > 0 else torch.zeros_like(y)
        y = ddpm_step(y, net(y, t), i, z, sub)
    return y.numpy()
