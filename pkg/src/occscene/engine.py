"""Joint training of the generator and the perception model, sampling, and checkpoints."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import Config, from_dict
from .denoiser import DenoiserNet, build_denoiser
from .errors import ConfigHashMismatch, FormatError, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .numcore import Streams
from .perception import LossWeights, PerceptionNet, class_weights_from_labels, dataset_miou, perception_loss
from .schedule import NoiseSchedule, ddpm_step, make_linear_schedule, q_sample, respace

log = logging.getLogger(__name__)

PRETRAIN, STAGE1, STAGE2 = 0, 1, 2


@dataclass
class Batch:
    frames: torch.Tensor  # (B, N, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (B, D, H, W) long
    tokens: torch.Tensor  # (B, 8) long
    cams: torch.Tensor  # (B, N, 25)

    def __len__(self):
        return self.frames.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.frames[idx], self.labels[idx], self.tokens[idx], self.cams[idx])


def to_model_space(frames_hwc):
    """(…, H, W, 3) in [0, 1] -> (…, 3, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(frames_hwc), dtype=torch.float32)
    return x.movedim(-1, -3) * 2 - 1


def to_image_space(frames):
    """Inverse of ``to_model_space``, clamped to [0, 1]."""
    return ((frames.movedim(-3, -1) + 1) / 2).clamp(0, 1)


def make_batch(samples) -> Batch:
    if not samples:
        raise ShapeMismatch("empty batch")
    frames = torch.stack([to_model_space(s.frames) for s in samples])
    labels = torch.stack([torch.as_tensor(s.grid.labels.astype(np.int64)) for s in samples])
    tokens = torch.stack([torch.as_tensor(s.spec.tokens.astype(np.int64)) for s in samples])
    cams = torch.stack([torch.as_tensor(s.camera_flats(), dtype=torch.float32) for s in samples])
    return Batch(frames, labels, tokens, cams)


def build_perception(cfg: Config) -> PerceptionNet:
    p = cfg.perception
    return PerceptionNet(cfg.world.grid_dims, cfg.world.image_size, cfg.world.num_classes, p.channels, p.lift_channels, p.zero_init_head)


def schedule_from(cfg: Config) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end)


def _finite_or_raise(name, value: torch.Tensor, step):
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLoss(f"{name} became non-finite at step {step}: {value.detach().cpu().numpy()}")


class Trainer:
    """Owns both networks, their optimizers and the step counter.

    Training runs three phases back to back: perception pretraining on clean
    key frames, stage 1 (perception frozen) and stage 2 (joint). All
    randomness of step ``k`` comes from the stream ``(seed, "step", k)`` and
    batch order from ``(seed, "epoch", e)``, so a run resumed from a
    checkpoint replays exactly.
    """

    def __init__(self, cfg: Config, class_weights=None):
        self.cfg = cfg
        self.streams = Streams(cfg.train.seed)
        torch.manual_seed(self.streams.int("init"))
        self.denoiser: DenoiserNet = build_denoiser(cfg)
        self.perception: PerceptionNet = build_perception(cfg)
        self.offline: PerceptionNet | None = None
        t = cfg.train
        self.opt_d = torch.optim.AdamW(self.denoiser.parameters(), lr=t.lr_denoiser, weight_decay=t.weight_decay)
        self.opt_p = torch.optim.AdamW(self.perception.parameters(), lr=t.lr_perception, weight_decay=t.weight_decay)
        self.sched = schedule_from(cfg)
        p = cfg.perception
        self.loss_weights = LossWeights(p.lambda_ce, p.lambda_sem, p.lambda_geo)
        nc = cfg.world.num_classes
        self.class_weights = torch.ones(nc) if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32)
        self.step = 0
        self.history: list[dict] = []

    # ----- schedule of phases

    def steps_per_epoch(self, n: int) -> int:
        return max(1, math.ceil(n / self.cfg.train.batch_size))

    def phase_bounds(self, n: int):
        spe = self.steps_per_epoch(n)
        t = self.cfg.train
        a = t.pretrain_epochs * spe
        b = a + t.stage1_epochs * spe
        c = b + t.stage2_epochs * spe
        return a, b, c

    def phase_of(self, step: int, n: int) -> int:
        a, b, _ = self.phase_bounds(n)
        return PRETRAIN if step < a else STAGE1 if step < b else STAGE2

    def batch_indices(self, step: int, n: int) -> np.ndarray:
        spe = self.steps_per_epoch(n)
        epoch, pos = divmod(step, spe)
        perm = self.streams.numpy("epoch", epoch).permutation(n)
        bs = self.cfg.train.batch_size
        return perm[pos * bs : (pos + 1) * bs]

    # ----- steps

    def _conditioning_net(self):
        return self.offline if self.cfg.train.mode == "independent" else self.perception

    def pretrain_step(self, batch: Batch) -> dict:
        self.perception.train()
        logits = self.perception(batch.frames[:, 0])
        lp = perception_loss(logits, batch.labels, self.class_weights, self.loss_weights)["total"]
        _finite_or_raise("L_p", lp, self.step)
        self.opt_p.zero_grad(set_to_none=True)
        lp.backward()
        nn.utils.clip_grad_norm_(self.perception.parameters(), self.cfg.train.grad_clip)
        self.opt_p.step()
        return {"L_LDM": float("nan"), "L_p": lp.item(), "total": lp.item()}

    def train_step(self, batch: Batch, stage: int) -> dict:
        """One diffusion step; ``stage`` 1 freezes perception, 2 trains both."""
        if len(batch) == 0:
            raise ShapeMismatch("empty batch")
        if stage not in (STAGE1, STAGE2):
            raise ValueError("stage must be 1 or 2")
        cfg = self.cfg
        gen = self.streams.torch("step", self.step)
        y0 = batch.frames if cfg.train.train_frames == "all" else batch.frames[:, :1]
        cams = batch.cams[:, : y0.shape[1]]
        B = y0.shape[0]
        t = torch.randint(0, self.sched.T, (B,), generator=gen)
        eps = torch.randn(y0.shape, generator=gen)
        y_t = q_sample(y0, t, eps, self.sched)
        p_in = y_t[:, 0] if cfg.train.perception_input == "noisy" else y0[:, 0]

        self.denoiser.train()
        self.perception.train(stage == STAGE2)
        with torch.set_grad_enabled(stage == STAGE2):
            occ = self.perception(p_in)
            lp = perception_loss(occ, batch.labels, self.class_weights, self.loss_weights, per_sample=True)["total"]
        occ_cond = None
        if self.denoiser.conditioned:
            if cfg.train.mode == "independent":
                with torch.no_grad():
                    occ_cond = self.offline(y0[:, 0])
            else:
                occ_cond = occ
        eps_hat = self.denoiser(y_t, t, batch.tokens, occ_cond, cams)
        l_ldm = (eps_hat - eps).square().reshape(B, -1).mean(1)
        w = torch.as_tensor(self.sched.alpha_bar, dtype=l_ldm.dtype)[t].sqrt()
        total = (l_ldm + w * lp).mean()
        _finite_or_raise("total loss", total, self.step)

        self.opt_d.zero_grad(set_to_none=True)
        self.opt_p.zero_grad(set_to_none=True)
        total.backward()
        nn.utils.clip_grad_norm_(self.denoiser.parameters(), cfg.train.grad_clip)
        self.opt_d.step()
        if stage == STAGE2:
            nn.utils.clip_grad_norm_(self.perception.parameters(), cfg.train.grad_clip)
            self.opt_p.step()
        return {"L_LDM": l_ldm.mean().item(), "L_p": lp.mean().item(), "total": total.item()}

    def snapshot_offline(self):
        self.offline = copy.deepcopy(self.perception).eval()
        for p in self.offline.parameters():
            p.requires_grad_(False)

    # ----- loop

    def fit(self, data: Batch, val: Batch | None = None, max_steps: int | None = None, on_step=None):
        """Train until the end of stage 2 or until ``self.step == max_steps``."""
        n = len(data)
        a, _, end = self.phase_bounds(n)
        spe = self.steps_per_epoch(n)
        stop = end if max_steps is None else min(end, max_steps)
        while self.step < stop:
            if self.step == a and self.offline is None and self.cfg.train.mode == "independent":
                self.snapshot_offline()
            phase = self.phase_of(self.step, n)
            batch = data.take(torch.as_tensor(self.batch_indices(self.step, n)))
            losses = self.pretrain_step(batch) if phase == PRETRAIN else self.train_step(batch, phase)
            row = {"step": self.step, "stage": phase, **losses}
            self.history.append(row)
            if on_step is not None:
                on_step(row)
            self.step += 1
            if self.step % spe == 0 and val is not None:
                self.history.append({"epoch": self.step // spe, "stage": phase, "miou": self.evaluate_miou(val)})
        if self.step == a and self.offline is None and self.cfg.train.mode == "independent":
            self.snapshot_offline()
        return self

    @torch.no_grad()
    def predict_grids(self, batch: Batch, chunk: int = 32) -> np.ndarray:
        self.perception.eval()
        out = []
        for s in range(0, len(batch), chunk):
            out.append(self.perception(batch.frames[s : s + chunk, 0]).argmax(1).numpy().astype(np.uint8))
        return np.concatenate(out) if out else np.zeros((0,), np.uint8)

    def evaluate_miou(self, batch: Batch) -> float:
        preds = self.predict_grids(batch)
        return dataset_miou(preds, batch.labels.numpy(), self.cfg.world.num_classes)

    def sample(self, tokens, cams, steps: int | None = None, seed: int = 0):
        nets = SamplingNets(self.denoiser, self._conditioning_net() or self.perception)
        return sample(nets, tokens, cams, steps or self.cfg.sample.steps, self.sched, seed)

    # ----- persistence

    def state_tensors(self) -> dict:
        out = {}
        for prefix, mod in (("denoiser", self.denoiser), ("perception", self.perception), ("offline", self.offline)):
            if mod is None:
                continue
            for k, v in mod.state_dict().items():
                out[f"{prefix}/{k}"] = v
        for prefix, opt in (("opt_d", self.opt_d), ("opt_p", self.opt_p)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    out[f"{prefix}/{idx}/{k}"] = torch.as_tensor(v)
        return out

    def meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "history": self.history,
            "class_weights": [float(x) for x in self.class_weights],
            "has_offline": self.offline is not None,
            "param_groups": {
                "opt_d": self.opt_d.state_dict()["param_groups"],
                "opt_p": self.opt_p.state_dict()["param_groups"],
            },
        }

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path, expect_hash: str | None = None, strict: bool = True) -> "Trainer":
        return load_checkpoint(path, expect_hash, strict)


@dataclass
class SamplingNets:
    denoiser: DenoiserNet
    perception: PerceptionNet


@torch.no_grad()
def sample(nets: SamplingNets, tokens, cams, steps: int, sched: NoiseSchedule, seed: int, noise=None, on_step=None):
    """Reverse diffusion over ``steps`` evenly spaced schedule indices.

    ``tokens`` is ``(B, 8)`` and ``cams`` ``(B, N, 25)``. Each iteration
    re-predicts occupancy from frame 0 of the current sample and feeds it to
    the denoiser. Returns ``(frames (B, N, 3, H, W), last occupancy logits)``.
    """
    sub = respace(sched, steps)
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    cams = torch.as_tensor(cams, dtype=torch.float32)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if cams.dim() == 2:
        cams = cams.unsqueeze(0)
    B, N = cams.shape[:2]
    if tokens.shape[0] != B:
        raise ShapeMismatch(f"{tokens.shape[0]} token rows for {B} camera sets")
    H, W = nets.denoiser.image_size
    gen = Streams(seed).torch("sample")
    y = torch.randn((B, N, 3, H, W), generator=gen) if noise is None else noise.clone()
    nets.denoiser.eval()
    nets.perception.eval()
    occ = None
    for i in reversed(range(sub.T)):
        occ = nets.perception(y[:, 0])
        t = torch.full((B,), int(sub.timesteps[i]), dtype=torch.long)
        eps_hat = nets.denoiser(y, t, tokens, occ if nets.denoiser.conditioned else None, cams)
        z = torch.randn(y.shape, generator=gen) if i > 0 else torch.zeros_like(y)
        y = ddpm_step(y, eps_hat, i, z, sub)
        if on_step is not None:
            on_step(i)
    return y, occ


# ----- checkpoint container

MAGIC = b"OCK1"
VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.int32: 3, torch.uint8: 4, torch.bool: 5, torch.float16: 6}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _tensor_bytes(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(trainer: Trainer, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(bytes.fromhex(trainer.cfg.hash()))
    meta = json.dumps(trainer.meta(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    tensors = trainer.state_tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<HBB", len(nb), _DTYPES[t.dtype], t.dim()))
        buf.write(nb)
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        payload = _tensor_bytes(t)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    data = body + struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_checkpoint(path):
    """Parse an OCK1 file into ``(config_hash, meta, tensors)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise VersionMismatch(f"{path}: not an OCK1 checkpoint")
    if len(data) < 4 + 2 + 32 + 4:
        raise FormatError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch")
    cfg_hash = r.take(32).hex()
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        nlen, code, ndim = r.unpack("<HBB")
        name = r.take(nlen).decode()
        shape = r.unpack(f"<{ndim}I")
        (plen,) = r.unpack("<Q")
        dtype = _DTYPES_INV.get(code)
        if dtype is None:
            raise FormatError(f"unknown dtype code {code}")
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(r.take(plen), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return cfg_hash, meta, tensors


def _load_module(mod: nn.Module, prefix: str, tensors: dict):
    state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    mod.load_state_dict(state, strict=True)


def _load_optimizer(opt, prefix: str, tensors: dict, groups):
    state: dict = {}
    for k, v in tensors.items():
        if not k.startswith(prefix + "/"):
            continue
        _, idx, key = k.split("/", 2)
        state.setdefault(int(idx), {})[key] = v
    opt.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path, expect_hash: str | None = None, strict: bool = True) -> Trainer:
    cfg_hash, meta, tensors = read_checkpoint(path)
    cfg = from_dict(meta["config"])
    if cfg.hash() != cfg_hash:
        raise FormatError("embedded config does not match its hash")
    if expect_hash is not None and expect_hash != cfg_hash:
        msg = f"checkpoint config hash {cfg_hash[:12]} differs from expected {expect_hash[:12]}"
        if strict:
            raise ConfigHashMismatch(msg)
        log.warning(msg)
    tr = Trainer(cfg, meta["class_weights"])
    _load_module(tr.denoiser, "denoiser", tensors)
    _load_module(tr.perception, "perception", tensors)
    if meta["has_offline"]:
        tr.snapshot_offline()
        _load_module(tr.offline, "offline", tensors)
    _load_optimizer(tr.opt_d, "opt_d", tensors, meta["param_groups"]["opt_d"])
    _load_optimizer(tr.opt_p, "opt_p", tensors, meta["param_groups"]["opt_p"])
    tr.step = meta["step"]
    tr.history = meta["history"]
    return tr


def class_weights_for(samples, cfg: Config):
    p = cfg.perception
    return class_weights_from_labels([s.grid.labels for s in samples], cfg.world.num_classes, p.class_weight_min, p.class_weight_max)
