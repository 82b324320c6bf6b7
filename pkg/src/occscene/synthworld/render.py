"""Voxel ray marching renderer.

The palette and shading constants below are part of the dataset format: the
rendered frames are the ground truth pairing for each grid, so changing any of
them changes every stored dataset.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateCamera
from .camera import CameraParams
from .scene import OccupancyGrid

PALETTE = np.array(
    [
        [0.00, 0.00, 0.00],  # free, never drawn
        [0.35, 0.55, 0.25],  # ground
        [0.80, 0.45, 0.35],  # building
        [0.20, 0.35, 0.85],  # vehicle
    ]
)
BACKGROUND = np.array([0.60, 0.80, 0.95])
# brightness of a face whose normal is along world x, y, z
FACE_SHADE = np.array([0.85, 1.00, 0.70])
DEPTH_FALLOFF = 0.08


def depth_shade(depth_m):
    return 1.0 / (1.0 + DEPTH_FALLOFF * np.asarray(depth_m))


def camera_rays(cam: CameraParams, resolution):
    """Unit world-space directions for every pixel; pixel ``(row, col)`` is centred at ``(u=col, v=row)``."""
    Hi, Wi = resolution
    v, u = np.meshgrid(np.arange(Hi, dtype=np.float64), np.arange(Wi, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d_world = d_cam.reshape(-1, 3) @ cam.rotation  # R^T d for each row
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def march(labels: np.ndarray, origin: np.ndarray, dirs: np.ndarray):
    """Amanatides-Woo traversal of all rays at once, in voxel units.

    ``labels`` is indexed ``[d, h, w]`` while positions are ``(x, y, z) = (w, h, d)``.
    Returns hit class (0 for miss), entry distance, and the axis crossed on entry.
    """
    D, H, W = labels.shape
    ext = np.array([W, H, D], dtype=np.float64)
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0, 1.0 / dirs, np.inf)
        t1 = (0.0 - origin) * inv
        t2 = (ext - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    enter_axis = np.argmax(tmin, axis=1)
    t_enter = np.max(tmin, axis=1)
    t_exit = np.min(tmax, axis=1)
    inside = np.all((origin >= 0) & (origin < ext))
    t0 = np.maximum(t_enter, 0.0)
    active = t_exit > t0
    if inside:
        enter_axis = np.full(n, 2)

    p = origin + (t0 + 1e-9)[:, None] * dirs
    cell = np.clip(np.floor(p).astype(np.int64), 0, (ext - 1).astype(np.int64))
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.abs(inv)
        nxt = np.where(step > 0, cell + 1, cell).astype(np.float64)
        t_next = np.where(step != 0, (nxt - origin) * inv, np.inf)

    hit_class = np.zeros(n, dtype=np.int64)
    hit_t = np.full(n, np.inf)
    hit_axis = enter_axis.copy()
    t_cur = t0.copy()
    axis_cur = enter_axis.copy()
    rows = np.arange(n)
    for _ in range(D + H + W + 3):
        if not active.any():
            break
        idx = rows[active]
        c = cell[idx]
        lab = labels[c[:, 2], c[:, 1], c[:, 0]]
        hit = lab != 0
        hit_class[idx[hit]] = lab[hit]
        hit_t[idx[hit]] = t_cur[idx[hit]]
        hit_axis[idx[hit]] = axis_cur[idx[hit]]
        active[idx[hit]] = False
        idx = idx[~hit]
        ax = np.argmin(t_next[idx], axis=1)
        t_cur[idx] = t_next[idx, ax]
        axis_cur[idx] = ax
        cell[idx, ax] += step[idx, ax]
        t_next[idx, ax] += t_delta[idx, ax]
        out = (cell[idx, ax] < 0) | (cell[idx, ax] >= ext.astype(np.int64)[ax])
        active[idx[out]] = False
    return hit_class, hit_t, hit_axis


def render(grid: OccupancyGrid, cam: CameraParams, resolution) -> np.ndarray:
    """Render ``(H_img, W_img, 3)`` float32 colours in ``[0, 1]``."""
    if cam.fx == 0 or cam.fy == 0:
        raise DegenerateCamera("zero focal length")
    cam.check()
    Hi, Wi = (int(r) for r in resolution)
    if Hi <= 0 or Wi <= 0:
        raise ValueError("resolution must be positive")
    vs = grid.voxel_size
    dirs = camera_rays(cam, (Hi, Wi))
    origin = np.broadcast_to(cam.center / vs, dirs.shape)
    cls, t, axis = march(grid.labels, origin, dirs)
    depth = t * vs
    color = PALETTE[cls] * (FACE_SHADE[axis] * depth_shade(np.where(cls > 0, depth, 0.0)))[:, None]
    color = np.where((cls > 0)[:, None], color, BACKGROUND)
    return color.reshape(Hi, Wi, 3).astype(np.float32)
