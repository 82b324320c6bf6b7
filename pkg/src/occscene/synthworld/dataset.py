"""Paired samples (frames, cameras, grid, descriptor) and the OSD1 container."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, VersionMismatch
from .camera import CameraParams, default_camera, make_trajectory
from .render import render
from .scene import TOKEN_LENGTH, OccupancyGrid, SceneSpec, decode, generate_placeable, random_spec

MAGIC = b"OSD1"
VERSION = 1
_FILE_HEADER = struct.Struct("<4sHI")
# D, H, W, N, H_img, W_img, C, voxel size in mm, token count
_BLOCK_HEADER = struct.Struct("<9H")


@dataclass
class Sample:
    frames: np.ndarray  # (N, H_img, W_img, 3) float32
    cameras: list
    grid: OccupancyGrid
    spec: SceneSpec

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (N, H, W, 3), got {self.frames.shape}")
        if len(self.cameras) != self.frames.shape[0]:
            raise ValueError("one camera per frame required")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def camera_flats(self) -> np.ndarray:
        return np.stack([c.flat for c in self.cameras])


def generate_sample(seed: int, world) -> Sample:
    """One sample as a pure function of ``seed`` and the world config."""
    dims = tuple(world.grid_dims)
    spec = random_spec(seed, world.density)
    spec, grid = generate_placeable(spec, dims, world.voxel_size)
    start = default_camera(dims, world.voxel_size, world.image_size, world.focal, world.camera_height, world.camera_pitch)
    cams = make_trajectory(start, world.frames, world.trajectory_step)
    frames = np.stack([render(grid, c, world.image_size) for c in cams])
    return Sample(frames, cams, grid, spec)


def sample_seeds(seed: int, count: int, split: str = "train") -> list[int]:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(split.encode()),))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)] if count else []


def generate_dataset(world, count: int, seed: int, split: str = "train") -> list[Sample]:
    return [generate_sample(s, world) for s in sample_seeds(seed, count, split)]


def _encode_block(s: Sample) -> bytes:
    D, H, W = s.grid.dims
    N, Hi, Wi, _ = s.frames.shape
    vmm = int(round(s.grid.voxel_size * 1000))
    tokens = s.spec.tokens
    parts = [
        _BLOCK_HEADER.pack(D, H, W, N, Hi, Wi, s.grid.num_classes, vmm, len(tokens)),
        tokens.astype("<u2").tobytes(),
        s.grid.labels.astype(np.uint8).tobytes(),
        s.camera_flats().astype("<f4").tobytes(),
        s.frames.astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(samples, path, config_hash: str = "", seeds=None) -> dict:
    """Write the OSD1 container at ``path`` and a ``.json`` manifest beside it."""
    path = Path(path)
    offsets = []
    blob = bytearray(_FILE_HEADER.pack(MAGIC, VERSION, len(samples)))
    for s in samples:
        offsets.append(len(blob))
        blob += _encode_block(s)
    path.write_bytes(bytes(blob))
    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "count": len(samples),
        "config_hash": config_hash,
        "seeds": [int(s.spec.seed) for s in samples] if seeds is None else [int(x) for x in seeds],
        "offsets": offsets,
        "file_size": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _take(buf, pos, n):
    if pos + n > len(buf):
        raise FormatError("container is truncated")
    return buf[pos : pos + n], pos + n


def read_dataset(path) -> list[Sample]:
    buf = Path(path).read_bytes()
    head, pos = _take(buf, 0, _FILE_HEADER.size)
    magic, version, count = _FILE_HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"container version {version}, expected {VERSION}")
    samples = []
    for _ in range(count):
        start = pos
        raw, pos = _take(buf, pos, _BLOCK_HEADER.size)
        D, H, W, N, Hi, Wi, C, vmm, ntok = _BLOCK_HEADER.unpack(raw)
        if ntok != TOKEN_LENGTH:
            raise FormatError(f"unexpected token count {ntok}")
        tok_raw, pos = _take(buf, pos, 2 * ntok)
        lab_raw, pos = _take(buf, pos, D * H * W)
        cam_raw, pos = _take(buf, pos, 4 * 25 * N)
        frm_raw, pos = _take(buf, pos, 4 * N * Hi * Wi * 3)
        crc_raw, pos = _take(buf, pos, 4)
        if zlib.crc32(buf[start : pos - 4]) != struct.unpack("<I", crc_raw)[0]:
            raise FormatError(f"checksum mismatch in block at offset {start}")
        tokens = np.frombuffer(tok_raw, dtype="<u2").astype(np.int64)
        labels = np.frombuffer(lab_raw, dtype=np.uint8).reshape(D, H, W).copy()
        flats = np.frombuffer(cam_raw, dtype="<f4").reshape(N, 25)
        frames = np.frombuffer(frm_raw, dtype="<f4").reshape(N, Hi, Wi, 3).astype(np.float32)
        samples.append(
            Sample(
                frames,
                [CameraParams.from_flat(f) for f in flats],
                OccupancyGrid(labels, vmm / 1000.0, C),
                decode(tokens),
            )
        )
    if pos != len(buf):
        raise FormatError("trailing bytes after last block")
    return samples
