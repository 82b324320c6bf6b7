"""Diagonal state-space layers: zero-order-hold discretization and the linear scan."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeMismatch

SERIES_THRESHOLD = 1e-6
# Per-step log decay floor; exp(-40) ~ 4e-18 is below any representable state change.
LOG_DECAY_FLOOR = -40.0
# Largest summed log decay allowed inside one closed-form chunk, per dtype,
# leaving headroom below the exp overflow point for the drive magnitude.
_CHUNK_BUDGET = {torch.float64: 600.0, torch.float32: 60.0}
# |x| above which exp(x) - 1 keeps full relative precision of the dtype's training use
_EXP_MINUS_ONE_SAFE = {torch.float32: 1e-2}


@dataclass
class SsmParams:
    """Continuous parameters of a diagonal SSM with ``d`` channels and ``n`` states.

    ``A`` is ``(d, n)`` and strictly negative, ``B`` and ``C`` are ``(d, n)``,
    ``log_delta`` is ``(d,)``.
    """

    A: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor
    log_delta: torch.Tensor

    @property
    def delta(self):
        return self.log_delta.exp()

    @property
    def state_dim(self) -> int:
        return self.A.shape[-1]

    def __post_init__(self):
        if self.A.shape != self.B.shape or self.A.shape != self.C.shape:
            raise ShapeMismatch("A, B and C must share a shape")
        if self.log_delta.shape != self.A.shape[:1]:
            raise ShapeMismatch("one timescale per channel required")
        if bool((self.A >= 0).any()):
            raise ValueError("A must be strictly negative")


def zoh_gain(A, delta):
    """``(exp(delta*A) - 1) / A``, with the series ``delta * (1 + x/2 + x^2/6)`` below ``|x| < 1e-6``."""
    x = delta * A
    bound = delta.detach().abs().min() * A.detach().abs().min() if x.numel() else x.new_tensor(1.0)
    if bool(bound >= _EXP_MINUS_ONE_SAFE[x.dtype] if x.dtype in _EXP_MINUS_ONE_SAFE else False):
        # far from zero exp(x) - 1 costs at most ~1e-5 relative error in float32 and is much cheaper than expm1
        return (torch.exp(x) - 1) / A
    if bool(bound >= SERIES_THRESHOLD):
        return torch.expm1(x) / A
    small = x.abs() < SERIES_THRESHOLD
    safe_A = torch.where(small, torch.ones_like(A), A)
    series = delta * (1 + x / 2 + x * x / 6)
    return torch.where(small, series, torch.expm1(x) / safe_A)


def zoh_discretize(A, B, delta):
    """Elementwise ZOH for diagonal ``A``: ``A_bar = exp(dA)``, ``B_bar = (exp(dA) - 1) / A * B``.

    Broadcasts over any shapes. Below ``|delta*A| < 1e-6`` the second factor is
    replaced by its series ``delta * (1 + x/2 + x^2/6)``.
    """
    return torch.exp(delta * A), zoh_gain(A, delta) * B


def zoh_params(params: SsmParams):
    return zoh_discretize(params.A, params.B, params.delta[:, None])


def _chunk_length(worst, dtype, L, cap):
    q = int(_CHUNK_BUDGET.get(dtype, 60.0) // max(worst, 1e-12))
    q = max(1, min(q, L))
    if cap:
        q = min(q, cap)
    # prefer a divisor of L when one is close, which avoids padding
    for cand in range(q, (q + 1) // 2 - 1, -1):
        if L % cand == 0:
            return cand
    return q


def scan_last(log_decay, drive, chunk=None):
    """``h_t = exp(log_decay_t) * h_{t-1} + drive_t`` along the last axis, ``h_0 = 0``.

    The sequence is cut into chunks solved in closed form,
    ``h_t = e^{S_t} (h_start + sum_{s<=t} e^{-S_s} drive_s)`` with ``S`` the
    running sum of log decays inside the chunk; only chunk end states are
    chained sequentially. The chunk length is the longest whose summed decay
    stays inside the dtype's exp range, optionally capped by ``chunk``.
    """
    dtype = torch.promote_types(log_decay.dtype, drive.dtype)
    ld = log_decay.to(dtype)
    u = drive.to(dtype)
    if ld.shape != u.shape:
        raise ShapeMismatch(f"log_decay {tuple(ld.shape)} vs drive {tuple(u.shape)}")
    lead, L = u.shape[:-1], u.shape[-1]
    if L == 0:
        return u
    worst = -float(ld.detach().min())
    if worst > -LOG_DECAY_FLOOR:
        ld = ld.clamp_min(LOG_DECAY_FLOOR)
        worst = -LOG_DECAY_FLOOR
    q = _chunk_length(worst, dtype, L, chunk)
    nc = -(-L // q)
    pad = nc * q - L
    if pad:
        ld = F.pad(ld, (0, pad))
        u = F.pad(u, (0, pad))
    ld = ld.reshape(*lead, nc, q)
    u = u.reshape(*lead, nc, q)
    S = torch.cumsum(ld, dim=-1)
    E = torch.exp(S)
    # exp(-S) rather than 1/E: the backward of a division squares E, which underflows
    h = E * torch.cumsum(u * torch.exp(-S), dim=-1)
    if nc > 1:
        carry = [h.new_zeros(lead)]
        for c in range(nc - 1):
            carry.append(h[..., c, -1] + E[..., c, -1] * carry[-1])
        h = h + E * torch.stack(carry, -1).unsqueeze(-1)
    h = h.reshape(*lead, nc * q)
    return h[..., :L] if pad else h


def linear_scan(log_decay, drive, chunk=None):
    """``h_t = exp(log_decay_t) * h_{t-1} + drive_t`` along axis 1 of ``(batch, L, ...)`` inputs."""
    if log_decay.shape != drive.shape:
        raise ShapeMismatch(f"log_decay {tuple(log_decay.shape)} vs drive {tuple(drive.shape)}")
    h = scan_last(log_decay.movedim(1, -1), drive.movedim(1, -1), chunk)
    return h.movedim(-1, 1)


def _flip(x):
    return torch.flip(x, dims=(1,))


def ssm_scan(x, params: SsmParams, direction="forward", chunk=None):
    """Non-selective scan ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = sum_n C h_t``.

    ``x`` is ``(L, d)`` or ``(batch, L, d)``; the backward direction is the
    forward scan of the reversed sequence, reversed back.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[-1] != params.A.shape[0]:
        raise ShapeMismatch(f"expected (batch, L, {params.A.shape[0]}), got {tuple(x.shape)}")
    if direction == "backward":
        y = _flip(ssm_scan(_flip(x), params, "forward", chunk))
        return y[0] if unbatched else y
    if direction != "forward":
        raise ValueError(f"unknown direction {direction!r}")
    A_bar, B_bar = zoh_params(params)
    log_decay = (params.delta[:, None] * params.A).expand(x.shape[0], x.shape[1], *params.A.shape)
    h = linear_scan(log_decay, B_bar * x.unsqueeze(-1), chunk)
    y = (h * params.C).sum(-1)
    return y[0] if unbatched else y


class SSM(nn.Module):
    """Diagonal SSM layer; with ``selective`` the timescale, B and C depend on the input token."""

    def __init__(self, d_model: int, state_dim: int = 8, selective: bool = True, chunk: int | None = None, delta_init: float = 0.1):
        super().__init__()
        self.d_model = d_model
        self.state_dim = state_dim
        self.selective = selective
        self.chunk = chunk
        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(d_model, 1)
        self.A_log = nn.Parameter(a.log())
        inv_softplus = math.log(math.expm1(delta_init))
        if selective:
            self.delta_proj = nn.Linear(d_model, d_model)
            nn.init.normal_(self.delta_proj.weight, std=0.02)
            nn.init.constant_(self.delta_proj.bias, inv_softplus)
            self.B_proj = nn.Linear(d_model, state_dim, bias=False)
            self.C_proj = nn.Linear(d_model, state_dim, bias=False)
        else:
            self.log_delta = nn.Parameter(torch.full((d_model,), math.log(delta_init)))
            self.B = nn.Parameter(torch.randn(d_model, state_dim) / math.sqrt(state_dim))
            self.C = nn.Parameter(torch.randn(d_model, state_dim) / math.sqrt(state_dim))

    @property
    def A(self):
        return -self.A_log.exp()

    def params(self) -> SsmParams:
        if self.selective:
            raise TypeError("a selective SSM has input-dependent parameters")
        return SsmParams(self.A, self.B, self.C, self.log_delta)

    def coefficients(self, x):
        """Per-step ``(log_decay, drive, C)`` for a forward scan of ``x`` (b, L, d)."""
        if not self.selective:
            p = self.params()
            log_decay = (p.delta[:, None] * p.A).expand(*x.shape, self.state_dim)
            return log_decay, zoh_params(p)[1] * x.unsqueeze(-1), p.C
        delta = F.softplus(self.delta_proj(x))  # (b, L, d)
        Bt = self.B_proj(x)  # (b, L, n)
        Ct = self.C_proj(x)
        A = self.A
        log_decay = delta.unsqueeze(-1) * A
        drive = zoh_gain(A, delta.unsqueeze(-1)) * (Bt.unsqueeze(2) * x.unsqueeze(-1))
        return log_decay, drive, Ct

    @staticmethod
    def readout(h, C):
        if C.dim() == 2:
            return (h * C).sum(-1)
        return (h @ C.unsqueeze(-1)).squeeze(-1)

    def forward(self, x, direction="forward"):
        if direction == "backward":
            return _flip(self.forward(_flip(x), "forward"))
        if direction != "forward":
            raise ValueError(f"unknown direction {direction!r}")
        log_decay, drive, C = self.coefficients(x)
        return self.readout(linear_scan(log_decay, drive, self.chunk), C)


class BiMamba(nn.Module):
    """Gated bidirectional SSM mixer; forward and backward outputs are summed.

    Both directions run as one batched scan (the backward input is reversed
    and stacked after the forward one).
    """

    def __init__(self, d_model: int, state_dim: int = 8, selective: bool = True, chunk: int | None = None):
        super().__init__()
        self.in_proj = nn.Linear(d_model, 2 * d_model)
        self.fwd = SSM(d_model, state_dim, selective, chunk)
        self.bwd = SSM(d_model, state_dim, selective, chunk)
        self.skip = nn.Parameter(torch.ones(d_model))
        self.chunk = chunk

    def forward(self, tokens):
        u, z = self.in_proj(tokens).chunk(2, dim=-1)
        u = F.silu(u)
        b = u.shape[0]
        if not self.fwd.selective:
            y = self.fwd(u, "forward") + self.bwd(u, "backward")
            return (y + self.skip * u) * F.silu(z)
        # both directions as one (2, b, d, n, L) problem, time on the last axis
        x2 = torch.stack([u, _flip(u)]).transpose(-1, -2)  # (2, b, d, L)
        f, r = self.fwd, self.bwd
        W_d = torch.stack([f.delta_proj.weight, r.delta_proj.weight])
        b_d = torch.stack([f.delta_proj.bias, r.delta_proj.bias])
        W_B = torch.stack([f.B_proj.weight, r.B_proj.weight])
        W_C = torch.stack([f.C_proj.weight, r.C_proj.weight])
        A = torch.stack([f.A, r.A])[:, None, :, :, None]  # (2, 1, d, n, 1)
        delta = F.softplus(W_d.unsqueeze(1) @ x2 + b_d[:, None, :, None])  # (2, b, d, L)
        Bt = W_B.unsqueeze(1) @ x2  # (2, b, n, L)
        Ct = W_C.unsqueeze(1) @ x2
        dl = delta.unsqueeze(3)
        log_decay = dl * A
        drive = zoh_gain(A, dl) * (Bt.unsqueeze(2) * x2.unsqueeze(3))
        h = scan_last(log_decay, drive, self.chunk)  # (2, b, d, n, L)
        y = (h * Ct.unsqueeze(2)).sum(3).transpose(-1, -2)  # (2, b, L, d)
        y = y[0] + _flip(y[1]) + self.skip * u
        return y * F.silu(z)
