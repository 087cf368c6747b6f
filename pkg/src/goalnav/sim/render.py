"""Deterministic egocentric raycast renderer.

Every image column casts one ray through the grid (DDA traversal). The wall
slice height is ``H / d`` for perpendicular distance ``d`` (in cells), so no
fisheye correction is needed afterwards.
"""

from __future__ import annotations

import math

import numpy as np

from ..geometry import Pose
from .world import World

CEILING = np.array([34.0, 36.0, 48.0])
FLOOR_NEAR = np.array([120.0, 106.0, 88.0])
FLOOR_FAR = np.array([52.0, 48.0, 44.0])
_FAR = 1e30


class RenderError(ValueError):
    pass


def cast_rays(world: World, p: Pose, width: int, fov: float):
    """Cast ``width`` rays; returns perpendicular distance, hit cell, side and wall coordinate.

    Column 0 is the leftmost ray. ``side`` is 0 for walls crossed along x and
    1 along y; ``wall_u`` in [0, 1) is the hit position along the wall face.
    """
    px, py = p.x / world.cell_size, p.y / world.cell_size
    fwd = np.array([math.cos(p.yaw), math.sin(p.yaw)])
    left = np.array([-fwd[1], fwd[0]]) * math.tan(fov / 2.0)
    camx = 1.0 - 2.0 * (np.arange(width) + 0.5) / width
    rx = fwd[0] + left[0] * camx
    ry = fwd[1] + left[1] * camx

    map_x = np.full(width, math.floor(px), dtype=np.int64)
    map_y = np.full(width, math.floor(py), dtype=np.int64)
    with np.errstate(divide="ignore"):
        delta_x = np.where(rx == 0.0, _FAR, np.abs(1.0 / np.where(rx == 0.0, 1.0, rx)))
        delta_y = np.where(ry == 0.0, _FAR, np.abs(1.0 / np.where(ry == 0.0, 1.0, ry)))
    step_x = np.where(rx < 0, -1, 1)
    step_y = np.where(ry < 0, -1, 1)
    side_x = np.where(rx < 0, (px - map_x) * delta_x, (map_x + 1.0 - px) * delta_x)
    side_y = np.where(ry < 0, (py - map_y) * delta_y, (map_y + 1.0 - py) * delta_y)

    hit = np.zeros(width, dtype=bool)
    side = np.zeros(width, dtype=np.int64)
    grid = world.grid
    n = grid.shape[0]
    for _ in range(4 * n + 4):
        active = ~hit
        if not active.any():
            break
        go_x = active & (side_x < side_y)
        go_y = active & ~go_x
        side_x = np.where(go_x, side_x + delta_x, side_x)
        map_x = np.where(go_x, map_x + step_x, map_x)
        side_y = np.where(go_y, side_y + delta_y, side_y)
        map_y = np.where(go_y, map_y + step_y, map_y)
        side = np.where(go_x, 0, np.where(go_y, 1, side))
        cx = np.clip(map_x, 0, n - 1)
        cy = np.clip(map_y, 0, n - 1)
        hit |= active & grid[cx, cy]
    dist = np.where(side == 0, side_x - delta_x, side_y - delta_y)
    dist = np.maximum(dist, 1e-6)
    wall = np.where(side == 0, py + dist * ry, px + dist * rx)
    wall_u = wall - np.floor(wall)
    return dist, np.clip(map_x, 0, n - 1), np.clip(map_y, 0, n - 1), side, wall_u


def render(world: World, p: Pose, height: int = 64, width: int = 64, fov: float = math.pi / 2) -> np.ndarray:
    """Render the view from ``p`` as an ``(height, width, 3)`` uint8 image."""
    if not world.pose_is_free(p):
        raise RenderError(f"cannot render from occupied position ({p.x:.3f}, {p.y:.3f})")
    dist, cx, cy, side, wall_u = cast_rays(world, p, width, fov)

    line_h = height / dist
    top = height / 2.0 - line_h / 2.0
    bottom = height / 2.0 + line_h / 2.0
    rows = np.arange(height)[:, None] + 0.5
    is_wall = (rows >= top[None, :]) & (rows < bottom[None, :])

    shade = 1.0 / (1.0 + 0.12 * dist)
    shade = shade * np.where(side == 1, 0.72, 1.0)
    shade = shade * np.where((wall_u < 0.06) | (wall_u > 0.94), 0.55, 1.0)
    wall_rgb = world.palette[cx, cy].astype(np.float64) * shade[:, None]

    frac = np.clip((rows[:, 0] - height / 2.0) / (height / 2.0), 0.0, 1.0)[:, None]
    floor_rgb = FLOOR_FAR * (1.0 - frac) + FLOOR_NEAR * frac
    lower = (rows >= height / 2.0)[:, :, None]
    background = np.where(lower, floor_rgb[:, None, :], CEILING[None, None, :])
    background = np.broadcast_to(background, (height, width, 3))

    img = np.where(is_wall[:, :, None], wall_rgb[None, :, :], background)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def wall_heights(world: World, p: Pose, height: int = 64, width: int = 64, fov: float = math.pi / 2) -> np.ndarray:
    """Per-column wall slice heights in pixels (clipped to the image)."""
    dist = cast_rays(world, p, width, fov)[0]
    return np.minimum(height / dist, height)
