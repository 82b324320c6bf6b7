"""Finite-difference verification of every differentiable operation and the composed graphs.

Each case builds a scalar function of one flat input vector from a random
micro-instance. Several tensors are packed into that vector when an op has
more than one differentiable input. Cases with many inputs are checked along
a handful of random directions instead of coordinate by coordinate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import numcore
from .config import Config, MdaConfig
from .denoiser import DenoiserNet, predict_noise
from .mda import (
    MDA,
    SSM,
    BiMamba,
    CameraEncoder,
    DeformableSampler,
    OccupancyEmbedding,
    PatchStacker,
    SsmParams,
    grid_gather,
    linear_scan,
    make_mixer,
    mda_forward,
    ssm_scan,
    trilinear_gather,
    zoh_discretize,
)
from .perception import LossWeights, PerceptionNet, perception_loss
from .schedule import ddpm_step, make_linear_schedule, q_sample

TOLERANCE = {torch.float64: 1e-5, torch.float32: 1e-3}
STEP = {torch.float64: 1e-6, torch.float32: 1e-2}
DIRECTIONS = 6
# inputs larger than this are probed along random directions
MAX_COORDS = 48


@dataclass
class CheckResult:
    name: str
    dtype: str
    trials: int
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _pack(shapes, fn):
    sizes = [math.prod(s) for s in shapes]

    def f(x):
        parts = torch.split(x, sizes)
        return fn(*[p.reshape(s) for p, s in zip(parts, shapes)])

    return f


def _readout(out, g):
    """Random linear functional of ``out`` with O(1) magnitude."""
    r = torch.randn(out.shape, generator=g, dtype=torch.float64).to(out.dtype) / math.sqrt(out.numel())
    return lambda y: (y * r).sum()


def _directional(f, x0, g, k=DIRECTIONS):
    v = torch.randn(x0.numel(), k, generator=g, dtype=torch.float64)
    v = (v / v.norm(dim=0, keepdim=True)).to(x0.dtype)
    return (lambda s: f(x0 + v @ s)), torch.zeros(k, dtype=x0.dtype)


def _rand(g, *shape, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=g, dtype=torch.float64)


def _randomize(module: nn.Module, g, scale=0.3):
    """Overwrite every parameter (including zero-initialized ones) with small random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale)
    return module


# ----- case builders: (generator, dtype, cfg) -> (f, x)


def _unary(op):
    domain = {"exp": (-2, 2), "sigmoid": (-3, 3), "log": (0.5, 2), "sqrt": (0.5, 2)}[op]

    def build(g, dt, cfg):
        x = _rand(g, 3, 4, lo=domain[0], hi=domain[1]).to(dt)
        r = _readout(x, g)
        return (lambda v: r(numcore.elementwise(op, v.reshape(3, 4)))), x.reshape(-1)

    return build


def _binary(op):
    def build(g, dt, cfg):
        a = _rand(g, 3, 4).to(dt)
        b = (_rand(g, 4, lo=0.5, hi=2) * torch.sign(_rand(g, 4))).to(dt)
        r = _readout(a, g)
        f = _pack([(3, 4), (4,)], lambda a_, b_: r(numcore.elementwise(op, a_, b_)))
        return f, torch.cat([a.reshape(-1), b])

    return build


def _matmul(g, dt, cfg):
    a, b = _rand(g, 3, 4).to(dt), _rand(g, 4, 2).to(dt)
    r = _readout(a @ b, g)
    return _pack([(3, 4), (4, 2)], lambda a_, b_: r(numcore.matmul(a_, b_))), torch.cat([a.reshape(-1), b.reshape(-1)])


def _conv(dims, stride):
    in_shape = {1: (2, 9), 2: (2, 5, 6), 3: (1, 3, 4, 4)}[dims]
    k_shape = {1: (3, 2, 3), 2: (2, 2, 3, 3), 3: (2, 1, 2, 2, 2)}[dims]

    def build(g, dt, cfg):
        a, k, bias = _rand(g, *in_shape).to(dt), _rand(g, *k_shape).to(dt), _rand(g, k_shape[0]).to(dt)
        out = numcore.conv(a, k, dims, stride=stride, padding=1, bias=bias)
        r = _readout(out, g)
        f = _pack([in_shape, k_shape, (k_shape[0],)], lambda a_, k_, b_: r(numcore.conv(a_, k_, dims, stride=stride, padding=1, bias=b_)))
        x = torch.cat([a.reshape(-1), k.reshape(-1), bias])
        return _directional(f, x, g) if x.numel() > MAX_COORDS else (f, x)

    return build


def _zoh(g, dt, cfg):
    A = -_rand(g, 5, lo=0.1, hi=3).to(dt)
    B = _rand(g, 5).to(dt)
    delta = _rand(g, 5, lo=0.02, hi=1).to(dt)
    r1, r2 = _readout(A, g), _readout(A, g)

    def fn(A_, B_, d_):
        A_bar, B_bar = zoh_discretize(A_, B_, d_)
        return r1(A_bar) + r2(B_bar)

    return _pack([(5,)] * 3, fn), torch.cat([A, B, delta])


def _linear_scan(g, dt, cfg):
    shape = (2, 10, 2)
    ld = _rand(g, *shape, lo=-2, hi=-0.01).to(dt)
    u = _rand(g, *shape).to(dt)
    r = _readout(u, g)
    f = _pack([shape, shape], lambda a, b: r(linear_scan(a, b, chunk=4)))
    return f, torch.cat([ld.reshape(-1), u.reshape(-1)])


def _ssm_scan(direction):
    def build(g, dt, cfg):
        d, n, L = 2, 3, 8
        A = -_rand(g, d, n, lo=0.2, hi=2).to(dt)
        C = _rand(g, d, n).to(dt)
        x0 = _rand(g, L, d).to(dt)
        B = _rand(g, d, n).to(dt)
        ld = _rand(g, d, lo=-2, hi=0).to(dt)
        r = _readout(x0, g)

        def fn(x, B_, ld_):
            return r(ssm_scan(x, SsmParams(A, B_, C, ld_), direction, chunk=3))

        return _pack([(L, d), (d, n), (d,)], fn), torch.cat([x0.reshape(-1), B.reshape(-1), ld])

    return build


def _module_case(make, in_shape):
    def build(g, dt, cfg):
        m = _randomize(make(cfg), g).to(dt)
        x = _rand(g, *in_shape).to(dt)
        r = _readout(m(x), g)
        f = lambda v: r(m(v.reshape(in_shape)))  # noqa: E731
        x = x.reshape(-1)
        return _directional(f, x, g) if x.numel() > MAX_COORDS else (f, x)

    return build


def _gather(fn):
    def build(g, dt, cfg):
        vshape, K = (1, 2, 3, 2, 4), 2
        cshape = (1, K, 3, 3, 2, 4)
        vol = _rand(g, *vshape).to(dt)
        # integer base in [-1, extent] plus a fraction kept away from the trilinear kinks
        base = torch.stack([torch.randint(-1, e + 1, cshape[:2] + cshape[3:], generator=g) for e in vshape[2:]], 2)
        coords = (base + _rand(g, *cshape, lo=0.1, hi=0.9)).to(dt)
        r = _readout(fn(vol, coords), g)
        f = _pack([vshape, cshape], lambda v, c: r(fn(v, c)))
        return _directional(f, torch.cat([vol.reshape(-1), coords.reshape(-1)]), g)

    return build


def _sampler(g, dt, cfg):
    C, K, shape = 2, 3, (1, 2, 3, 2, 4)
    m = DeformableSampler(C, K)
    _randomize(m, g, 0.05)
    with torch.no_grad():
        # offsets centred half-way between voxels so small perturbations do not cross a kink
        m.predictor.bias[: 3 * K] = 0.5
    m = m.to(dt)
    x = _rand(g, *shape).to(dt)
    gate = torch.rand(shape, generator=g, dtype=torch.float64).to(dt)
    r = _readout(m(x, gate), g)
    f = _pack([shape, shape], lambda a, b: r(m(a, b)))
    return _directional(f, torch.cat([x.reshape(-1), gate.reshape(-1)]), g)


def _camera(g, dt, cfg):
    m = _randomize(CameraEncoder(2), g, 0.2).to(dt)
    flat = _rand(g, 2, 25).to(dt)
    r = _readout(m(flat, (3, 4, 5)), g)
    return _directional(lambda v: r(m(v.reshape(2, 25), (3, 4, 5))), flat.reshape(-1), g)


def _occ_embed(g, dt, cfg):
    m = _randomize(OccupancyEmbedding(3, 2), g).to(dt)
    shape = (1, 3, 2, 3, 4)
    x = _rand(g, *shape, lo=-2, hi=2).to(dt)
    r = _readout(m(x, (5, 6)), g)
    return _directional(lambda v: r(m(v.reshape(shape), (5, 6))), x.reshape(-1), g)


def _stacker(g, dt, cfg):
    m = _randomize(PatchStacker(2, 3, 4, 2), g).to(dt)
    lshape, vshape = (1, 2, 2, 4, 4), (1, 3, 2, 4, 4)

    def fn(lat, v0, v1):
        seq, _ = m.stack(lat, [v0, v1])
        return seq

    x = _rand(g, math.prod(lshape) + 2 * math.prod(vshape)).to(dt)
    f0 = _pack([lshape, vshape, vshape], fn)
    r = _readout(f0(x), g)
    return _directional(lambda v: r(f0(v)), x, g)


def _perception_loss(g, dt, cfg):
    shape = (2, 4, 2, 3, 3)
    logits = _rand(g, *shape, lo=-2, hi=2).to(dt)
    gt = torch.randint(0, 4, (2, 2, 3, 3), generator=g)
    cw = np.array([0.2, 1.5, 3.0, 1.0])
    lw = LossWeights(1.0, 0.7, 0.4)
    f = lambda v: perception_loss(v.reshape(shape), gt, cw, lw)["total"]  # noqa: E731
    return _directional(f, logits.reshape(-1), g)


def _perception_net(g, dt, cfg):
    m = _randomize(PerceptionNet((4, 2, 4), (8, 12), 4, channels=4, lift_channels=2), g, 0.3).to(dt)
    shape = (1, 3, 8, 12)
    x = _rand(g, *shape).to(dt)
    r = _readout(m(x), g)
    return _directional(lambda v: r(m(v.reshape(shape))), x.reshape(-1), g)


_SCHED = make_linear_schedule(50)


def _q_sample(g, dt, cfg):
    shape = (2, 3, 2, 2)
    t = int(torch.randint(0, _SCHED.T, (1,), generator=g))
    y0, eps = _rand(g, *shape).to(dt), _rand(g, *shape).to(dt)
    r = _readout(y0, g)
    f = _pack([shape, shape], lambda a, b: r(q_sample(a, t, b, _SCHED)))
    return f, torch.cat([y0.reshape(-1), eps.reshape(-1)])


def _ddpm(g, dt, cfg):
    shape = (2, 3, 2, 2)
    t = int(torch.randint(1, _SCHED.T, (1,), generator=g))
    y, e = _rand(g, *shape).to(dt), _rand(g, *shape).to(dt)
    z = _rand(g, *shape).to(dt)
    r = _readout(y, g)
    f = _pack([shape, shape], lambda a, b: r(ddpm_step(a, b, t, z, _SCHED)))
    return f, torch.cat([y.reshape(-1), e.reshape(-1)])


def _micro_mda(cfg: MdaConfig) -> MdaConfig:
    return replace(cfg, enabled=True, patch_size=2, model_dim=8, state_dim=3, occ_channels=3, sample_points=3, chunk=0)


def _prepare_mda(m: MDA, g):
    _randomize(m, g, 0.2)
    with torch.no_grad():
        for s in m.samplers:
            s.predictor.weight.mul_(0.1)
            s.predictor.bias[: 3 * s.points] = 0.5
            s.predictor.bias[3 * s.points :] = 1.0 / s.points
        if isinstance(m.encoder.mixer, BiMamba):
            for ssm in (m.encoder.mixer.fwd, m.encoder.mixer.bwd):
                ssm.A_log.copy_(torch.log(torch.arange(1, ssm.A_log.shape[-1] + 1, dtype=torch.float64)).expand_as(ssm.A_log))
    return m


def _mda(g, dt, cfg):
    """Composed module on a two-frame 8x8 latent."""
    m = _prepare_mda(MDA(4, 4, 2, _micro_mda(cfg.mda)), g).to(dt)
    shapes = [(1, 4, 2, 8, 8), (1, 4, 3, 4, 4), (1, 2, 25)]
    x = torch.cat([_rand(g, math.prod(s)) for s in shapes]).to(dt)
    f0 = _pack(shapes, lambda lat, occ, cams: mda_forward(m, lat, occ, cams))
    r = _readout(f0(x), g)
    return _directional(lambda v: r(f0(v)), x, g)


def _denoiser(g, dt, cfg):
    """Noise prediction plus mean squared error against a fixed target."""
    net = DenoiserNet((16, 16), (8, 8, 16), time_dim=16, token_dim=8, groups=4, num_classes=4, frames=2,
                      mda_cfg=_micro_mda(cfg.mda))
    _randomize(net, g, 0.2)
    _prepare_mda(net.mda, g)
    net = net.to(dt)
    shapes = [(1, 2, 3, 16, 16), (1, 4, 3, 4, 4)]
    t = torch.randint(0, 200, (1,), generator=g)
    tokens = torch.randint(0, net.token_table.num_embeddings, (1, 5), generator=g)
    cams = _rand(g, 1, 2, 25).to(dt)
    target = _rand(g, *shapes[0]).to(dt)

    def fn(y, occ):
        return ((predict_noise(net, y, t, tokens, occ, cams) - target) ** 2).mean()

    x = torch.cat([_rand(g, math.prod(s)) for s in shapes]).to(dt)
    return _directional(_pack(shapes, fn), x, g)


def _mixer(kind):
    return _module_case(lambda cfg: make_mixer(kind, 4, 3, True, 3), (1, 7, 4))


CASES: dict[str, Callable] = {
    **{f"elementwise.{op}": _unary(op) for op in ("exp", "log", "sigmoid", "sqrt")},
    **{f"elementwise.{op}": _binary(op) for op in ("add", "sub", "mul", "div")},
    "matmul": _matmul,
    "conv1d": _conv(1, 1),
    "conv2d.strided": _conv(2, 2),
    "conv3d": _conv(3, 1),
    "zoh_discretize": _zoh,
    "linear_scan": _linear_scan,
    "ssm_scan.forward": _ssm_scan("forward"),
    "ssm_scan.backward": _ssm_scan("backward"),
    "ssm.selective": _module_case(lambda cfg: SSM(4, 3, True, 3), (2, 9, 4)),
    "bimamba": _mixer("mamba"),
    "attention": _mixer("attention"),
    "gru": _mixer("gru"),
    "trilinear_gather": _gather(trilinear_gather),
    "grid_gather": _gather(grid_gather),
    "deformable_sampler": _sampler,
    "camera_encoder": _camera,
    "occupancy_embedding": _occ_embed,
    "patch_stack": _stacker,
    "perception_loss": _perception_loss,
    "perception_net": _perception_net,
    "q_sample": _q_sample,
    "ddpm_step": _ddpm,
    "mda_forward": _mda,
    "predict_noise": _denoiser,
}


def run_case(name: str, dtype=torch.float64, trials: int = 10, seed: int = 0, cfg: Config | None = None) -> CheckResult:
    cfg = Config() if cfg is None else cfg
    build = CASES[name]
    worst = 0.0
    t0 = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        for k in range(trials):
            g = numcore.Streams(seed).torch("gradsuite", name, k)
            torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=g)))
            f, x = build(g, dtype, cfg)
            rep = numcore.grad_check(f, x.to(dtype), step=STEP[dtype], tol=TOLERANCE[dtype])
            worst = max(worst, rep.max_rel_err)
    return CheckResult(name, str(dtype).replace("torch.", ""), trials, worst, TOLERANCE[dtype], time.perf_counter() - t0)


def run_suite(cfg: Config | None = None, trials: int = 10, seed: int = 0, dtypes=(torch.float64, torch.float32),
              names=None, on_result=None) -> list[CheckResult]:
    results = []
    for name in names or CASES:
        for dt in dtypes:
            res = run_case(name, dt, trials, seed, cfg)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results
