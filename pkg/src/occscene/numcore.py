"""Array core: checked tensor primitives, finite-difference verification, RNG streams.

Tensors are ``torch.Tensor`` instances; reverse-mode differentiation is torch
autograd. This module adds the error contracts the rest of the package relies
on (shape and domain checks), a central-difference gradient checker that is
independent of autograd, and named, counter-based random streams.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, NonFiniteValue, ShapeMismatch

ORACLE_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32

Tensor = torch.Tensor

_UNARY = ("exp", "log", "sigmoid", "sqrt")
_BINARY = ("add", "sub", "mul", "div")


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    """Trailing-dimension broadcast of any number of shapes."""
    ndim = max((len(s) for s in shapes), default=0)
    out = []
    for axis in range(-ndim, 0):
        extent = 1
        for s in shapes:
            if len(s) + axis < 0:
                continue
            e = int(s[axis])
            if e == 1 or e == extent:
                continue
            if extent != 1:
                raise ShapeMismatch(f"shapes {[tuple(s) for s in shapes]} do not broadcast")
            extent = e
        out.append(extent)
    return tuple(out)


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        if op == "exp":
            return torch.exp(a)
        if op == "sigmoid":
            return torch.sigmoid(a)
        if op == "log":
            if bool((a <= 0).any()):
                raise DomainError("log of a nonpositive value")
            return torch.log(a)
        if bool((a < 0).any()):
            raise DomainError("sqrt of a negative value")
        return torch.sqrt(a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} takes two operands")
    broadcast_shape(a.shape, b.shape)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if bool((b == 0).any()):
        raise DomainError("division by zero")
    return a / b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _expand(v, dims):
    if isinstance(v, int):
        return (v,) * dims
    v = tuple(int(i) for i in v)
    if len(v) != dims:
        raise ShapeMismatch(f"expected {dims} values, got {v}")
    return v


def conv_output_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv(a: Tensor, kernel: Tensor, dims: int, stride=1, padding=0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation over ``dims`` spatial axes.

    ``a`` is ``(C_in, *spatial)`` or batched ``(B, C_in, *spatial)``;
    ``kernel`` is ``(C_out, C_in, *k)``.
    """
    if dims not in (1, 2, 3):
        raise ValueError("dims must be 1, 2 or 3")
    if kernel.dim() != dims + 2:
        raise ShapeMismatch(f"kernel rank {kernel.dim()} does not match dims={dims}")
    unbatched = a.dim() == dims + 1
    if not unbatched and a.dim() != dims + 2:
        raise ShapeMismatch(f"input rank {a.dim()} does not match dims={dims}")
    x = a.unsqueeze(0) if unbatched else a
    if x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    stride = _expand(stride, dims)
    padding = _expand(padding, dims)
    for e, k, s, p in zip(x.shape[2:], kernel.shape[2:], stride, padding):
        if conv_output_extent(e, k, s, p) <= 0:
            raise ShapeMismatch("convolution output extent is not positive")
    fn = (F.conv1d, F.conv2d, F.conv3d)[dims - 1]
    out = fn(x, kernel, bias, stride=stride, padding=padding)
    return out[0] if unbatched else out


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``x`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = x.detach().clone()
    xv = x0.clone().requires_grad_(True)
    y = f(xv)
    if y.numel() != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    if not torch.isfinite(y).all():
        raise NonFiniteValue("function value is not finite at x")
    g = torch.autograd.grad(y.reshape(()), xv, allow_unused=True)[0] if y.requires_grad else None
    analytic = np.zeros(x0.numel()) if g is None else g.detach().double().reshape(-1).numpy()

    numeric = np.empty(x0.numel())
    flat = x0.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += step
            xm[i] -= step
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise NonFiniteValue(f"probe at coordinate {i} is not finite")
            # differences of the probes as actually stored, not of x +- step
            h = float(xp[i]) - float(xm[i])
            numeric[i] = (float(fp) - float(fm)) / h
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, max_err <= tol, analytic, numeric)


def _key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class Streams:
    """Named random streams derived from one seed.

    Each stream is a Philox (counter-based) generator keyed by the seed and a
    path of names/integers, so call sites never share state and any stream can
    be reconstructed from ``(seed, path)`` alone.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _seq(self, path):
        key = tuple(_key(p) if isinstance(p, str) else int(p) for p in path)
        return np.random.SeedSequence(self.seed, spawn_key=key)

    def numpy(self, *path) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._seq(path)))

    def torch(self, *path) -> torch.Generator:
        seed = int(self._seq(path).generate_state(1, dtype=np.uint64)[0])
        return torch.Generator().manual_seed(seed & ((1 << 63) - 1))

    def int(self, *path) -> int:
        return int(self._seq(path).generate_state(1, dtype=np.uint32)[0])

    def normal(self, shape, *path, dtype=TRAIN_DTYPE) -> Tensor:
        return torch.randn(tuple(shape), generator=self.torch(*path), dtype=dtype)


def set_threads_from_env() -> None:
    import os

    n = os.environ.get("OCCSCENE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def is_finite(t: Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def nan_guard(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteValue(f"{name} is not finite ({value})")
    return value
