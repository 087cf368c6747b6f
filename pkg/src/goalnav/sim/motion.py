"""Action stepping with collision clipping and expert trajectory generation."""

from __future__ import annotations

import math

import numpy as np

from ..data import Episode
from ..geometry import ActionLike, Pose, decode_waypoint_or_straight, wrap_angle
from .planning import shortest_path_cells
from .render import render
from .world import World

COLLISION_RESOLUTION = 0.05
DEFAULT_MAX_STEP = 1.5


def step(world: World, p: Pose, a: ActionLike, max_step: float = DEFAULT_MAX_STEP) -> Pose:
    """Execute action ``a`` from ``p``.

    The planar displacement is clipped to ``max_step`` and followed until the
    last collision-free sample (every 0.05 cells) along the segment; the
    heading change is applied regardless of collisions.
    """
    rel = decode_waypoint_or_straight(a)
    dx, dy = rel.dx, rel.dy
    norm = math.hypot(dx, dy)
    if norm > max_step:
        dx, dy = dx * max_step / norm, dy * max_step / norm
        norm = max_step
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    wx, wy = c * dx - s * dy, s * dx + c * dy
    x, y = p.x, p.y
    if norm > 0.0:
        n = max(1, math.ceil(norm / (COLLISION_RESOLUTION * world.cell_size)))
        frac = np.arange(1, n + 1) / n
        xs = p.x + wx * frac
        ys = p.y + wy * frac
        ix = np.floor(xs / world.cell_size).astype(np.int64)
        iy = np.floor(ys / world.cell_size).astype(np.int64)
        inside = (ix >= 0) & (ix < world.size) & (iy >= 0) & (iy < world.size)
        free = inside.copy()
        free[inside] = ~world.grid[ix[inside], iy[inside]]
        blocked = np.flatnonzero(~free)
        last = n if blocked.size == 0 else int(blocked[0])
        if last > 0:
            x, y = float(xs[last - 1]), float(ys[last - 1])
    return Pose(x, y, p.yaw + rel.dyaw)


def expert_poses(world: World, start: Pose, goal_cell: tuple[int, int]) -> list[Pose]:
    """Rotate-then-translate pose chain along the shortest cell path.

    At every cell the agent first turns to face the next cell centre (one
    pose) and then moves onto it (another pose). If ``start`` is not at its
    cell centre the centre is visited first.
    """
    start_cell = world.cell_of(start.x, start.y)
    res = shortest_path_cells(world, start_cell, tuple(goal_cell))
    if not res.reachable:
        raise ValueError(f"goal cell {goal_cell} unreachable from {start_cell}")
    centers = [world.cell_center(c) for c in res.cells]
    cx, cy = centers[0]
    targets = centers[1:] if math.hypot(start.x - cx, start.y - cy) < 1e-9 else centers
    poses = [start]
    for tx, ty in targets:
        cur = poses[-1]
        if math.hypot(tx - cur.x, ty - cur.y) < 1e-12:
            continue
        heading = math.atan2(ty - cur.y, tx - cur.x)
        if abs(wrap_angle(heading - cur.yaw)) > 1e-12:
            poses.append(Pose(cur.x, cur.y, heading))
        poses.append(Pose(tx, ty, heading))
    return poses


def gen_expert_episode(
    world: World,
    start: Pose,
    goal_cell: tuple[int, int],
    height: int = 64,
    width: int = 64,
    fov: float = math.pi / 2,
) -> Episode:
    """Render the expert pose chain from ``start`` to ``goal_cell``."""
    poses = expert_poses(world, start, goal_cell)
    if len(poses) < 2:
        raise ValueError("start already at the goal cell centre; nothing to record")
    frames = np.stack([render(world, p, height, width, fov) for p in poses])
    meta = {"source": "simulator", "world_seed": int(world.seed), "goal_cell": [int(goal_cell[0]), int(goal_cell[1])]}
    return Episode(frames, np.array([p.as_array() for p in poses]), meta)


def random_start(world: World, rng: np.random.Generator) -> Pose:
    """Uniform free cell centre with a uniform heading."""
    cells = world.free_cells()
    cell = cells[int(rng.integers(len(cells)))]
    x, y = world.cell_center(cell)
    return Pose(x, y, float(rng.uniform(-math.pi, math.pi)))


def gen_expert_dataset(
    world: World,
    n_episodes: int,
    seed: int = 0,
    height: int = 64,
    width: int = 64,
    fov: float = math.pi / 2,
) -> list[Episode]:
    """``n_episodes`` expert episodes between random starts and random distinct goal cells."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    rng = np.random.default_rng(seed)
    cells = world.free_cells()
    if len(cells) < 2:
        raise ValueError("world needs at least two free cells")
    episodes = []
    while len(episodes) < n_episodes:
        start = random_start(world, rng)
        goal = cells[int(rng.integers(len(cells)))]
        if world.cell_of(start.x, start.y) == goal:
            continue
        episodes.append(gen_expert_episode(world, start, goal, height, width, fov))
    return episodes
