"""Pinhole cameras and forward-moving trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateCamera, ShapeMismatch


@dataclass
class CameraParams:
    """Intrinsics ``K`` (3x3) and world-to-camera extrinsics ``E`` (4x4).

    Camera axes follow the x-right, y-down, z-forward convention. Values are
    held at float32 precision so that a camera read back from disk renders
    identically.
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float32).astype(np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float32).astype(np.float64)
        if self.intrinsics.shape != (3, 3) or self.extrinsics.shape != (4, 4):
            raise ShapeMismatch("intrinsics must be 3x3 and extrinsics 4x4")

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.intrinsics.ravel(), self.extrinsics.ravel()]).astype(np.float32)

    @classmethod
    def from_flat(cls, flat) -> "CameraParams":
        flat = np.asarray(flat)
        if flat.shape != (25,):
            raise ShapeMismatch(f"flat camera vector must have 25 entries, got {flat.shape}")
        return cls(flat[:9].reshape(3, 3), flat[9:].reshape(4, 4))

    def check(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DegenerateCamera("focal lengths must be positive")

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points ``(..., 3)`` to pixel coordinates ``(..., 2)`` and depth."""
        cam = points @ self.rotation.T + self.translation
        z = cam[..., 2]
        u = self.fx * cam[..., 0] / z + self.cx
        v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def __eq__(self, other):
        return (
            isinstance(other, CameraParams)
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.extrinsics, other.extrinsics)
        )


def intrinsics_matrix(focal: float, width: int, height: int) -> np.ndarray:
    """Square pixels, principal point at the pixel centre ``(width/2, height/2)``."""
    return np.array([[focal, 0.0, width / 2], [0.0, focal, height / 2], [0.0, 0.0, 1.0]])


def look_along(center, forward, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ np.asarray(center, dtype=np.float64)
    return E


def default_camera(dims, voxel_size, resolution, focal=40.0, height=3.0, pitch_deg=20.0) -> CameraParams:
    """Camera at the front face of the grid, centred in width, pitched down."""
    D, H, W = dims
    Hi, Wi = resolution
    p = np.deg2rad(pitch_deg)
    center = (W * voxel_size / 2, min(height, H * voxel_size - 0.25), 0.25)
    return CameraParams(intrinsics_matrix(focal, Wi, Hi), look_along(center, (0.0, -np.sin(p), np.cos(p))))


def make_trajectory(start: CameraParams, n: int, step: float) -> list[CameraParams]:
    """``n`` poses, each moved ``step`` metres further along the view axis."""
    if n < 1:
        raise ValueError("trajectory needs at least one frame")
    out = [start]
    # the camera translation moves by -step along its own z axis per frame
    for k in range(1, n):
        E = start.extrinsics.copy()
        E[2, 3] = start.extrinsics[2, 3] - k * step
        out.append(CameraParams(start.intrinsics, E))
    return out
