"""Linear DDPM noise schedule, forward corruption and the reverse update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import IndexOutOfRange, InvalidRange, ShapeMismatch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``beta``, ``alpha = 1 - beta`` and ``alpha_bar = cumprod(alpha)`` (float64).

    ``timesteps`` maps each schedule index to the training timestep the
    denoiser should see; it is ``arange(T)`` except for respaced schedules.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_index(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexOutOfRange(f"step {t} outside [0, {self.T})")
        return t

    def to_dict(self):
        return {"beta": self.beta.tolist(), "timesteps": self.timesteps.tolist()}

    @classmethod
    def from_betas(cls, beta, timesteps=None) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise InvalidRange("beta must be a nonempty vector")
        if not np.all((beta > 0) & (beta < 1)):
            raise InvalidRange("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        ts = np.arange(len(beta)) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
        return cls(beta, alpha, np.cumprod(alpha), ts)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidRange("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule.from_betas(beta)


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Sub-sample ``steps`` evenly spaced indices ending at ``T - 1``.

    Indices are ``T - 1, T - 1 - s, ...`` with stride ``s = T / steps``, so the
    last kept index is ``s - 1`` rather than 0 and the final reverse step
    jumps straight to a clean estimate.

    The returned schedule has ``alpha[k] = alpha_bar[k] / alpha_bar[k-1]`` over
    the kept indices so that its cumulative products match the original.
    """
    if not 1 <= steps <= sched.T:
        raise InvalidRange(f"steps must be in [1, {sched.T}]")
    if steps == sched.T:
        return sched
    idx = (sched.T - 1 - np.floor(np.arange(steps) * sched.T / steps)).astype(np.int64)[::-1]
    ab = sched.alpha_bar[idx]
    prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / prev
    return NoiseSchedule.from_betas(beta, sched.timesteps[idx])


def _coef(value: float, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(value, dtype=like.dtype)


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps``.

    ``t`` is an int or a per-sample index tensor broadcast over the leading axis.
    """
    if y0.shape != eps.shape:
        raise ShapeMismatch(f"y0 {tuple(y0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.min() < 0 or t.max() >= sched.T:
            raise IndexOutOfRange("timestep outside schedule")
        ab = torch.as_tensor(sched.alpha_bar, dtype=y0.dtype)[t]
        ab = ab.reshape((-1,) + (1,) * (y0.dim() - 1))
        return ab.sqrt() * y0 + (1 - ab).sqrt() * eps
    t = sched.check_index(t)
    ab = sched.alpha_bar[t]
    return _coef(np.sqrt(ab), y0) * y0 + _coef(np.sqrt(1.0 - ab), y0) * eps


def ddpm_step(y_t: torch.Tensor, eps_hat: torch.Tensor, t: int, z: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One reverse step as printed in the consistency-constrained sampler.

    ``y_{t-1} = (y_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(1-alpha_t) * z``.
    ``t`` is a 0-based schedule index; index 0 is the final step, where ``z``
    must be zero.
    """
    if y_t.shape != eps_hat.shape or y_t.shape != z.shape:
        raise ShapeMismatch("y_t, eps_hat and z must share a shape")
    t = sched.check_index(t)
    if t == 0 and bool((z != 0).any()):
        raise ValueError("z must be zero at the final step")
    a = sched.alpha[t]
    ab = sched.alpha_bar[t]
    c_eps = (1.0 - a) / np.sqrt(1.0 - ab)
    mean = (y_t - _coef(c_eps, y_t) * eps_hat) * _coef(1.0 / np.sqrt(a), y_t)
    return mean + _coef(np.sqrt(1.0 - a), y_t) * z
