"""Procedural occupancy-grid worlds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Pose

MAX_WORLD_RETRIES = 100


class WorldGenerationError(RuntimeError):
    pass


def _palette(seed: int, size: int) -> np.ndarray:
    """Per-cell wall colours, a pure function of ``(seed, cell)``."""
    pal = np.empty((size, size, 3), dtype=np.uint8)
    for ix in range(size):
        for iy in range(size):
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, ix, iy, 0x9A1E77E])
            pal[ix, iy] = rng.integers(40, 256, size=3)
    return pal


@dataclass(frozen=True, eq=False)
class World:
    """Square grid world; ``grid[ix, iy]`` is True where the cell is occupied.

    Cell ``(ix, iy)`` spans ``[ix, ix+1) x [iy, iy+1)`` times ``cell_size`` in
    world coordinates, so its centre is ``((ix+0.5)*cell_size, (iy+0.5)*cell_size)``.
    """

    grid: np.ndarray
    seed: int
    density: float = 0.0
    cell_size: float = 1.0
    palette: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=bool)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        if self.palette is None:
            pal = _palette(self.seed, grid.shape[0])
            pal.setflags(write=False)
            object.__setattr__(self, "palette", pal)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, c)) for c in np.argwhere(~self.grid)]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (cell[0] + 0.5) * self.cell_size, (cell[1] + 0.5) * self.cell_size

    def is_free_cell(self, cell: tuple[int, int]) -> bool:
        ix, iy = cell
        return 0 <= ix < self.size and 0 <= iy < self.size and not self.grid[ix, iy]

    def is_free(self, x: float, y: float) -> bool:
        return self.is_free_cell(self.cell_of(x, y))

    def pose_is_free(self, p: Pose) -> bool:
        return self.is_free(p.x, p.y)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.cell_size == other.cell_size
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.palette, other.palette)
        )

    # ---------------------------------------------------------- serialisation

    def to_json(self) -> dict:
        flat = self.grid.astype(np.uint8).ravel()
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [flat.size]]))
        return {
            "seed": int(self.seed),
            "size": int(self.size),
            "density": float(self.density),
            "cell_size": float(self.cell_size),
            "rle": {"first": int(flat[0]), "runs": lengths.tolist()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "World":
        size = int(obj["size"])
        rle = obj["rle"]
        value, cells = int(rle["first"]), []
        for run in rle["runs"]:
            cells.extend([value] * int(run))
            value = 1 - value
        if len(cells) != size * size:
            raise ValueError(f"run-length data covers {len(cells)} cells, expected {size * size}")
        grid = np.array(cells, dtype=bool).reshape(size, size)
        return cls(grid=grid, seed=int(obj["seed"]), density=float(obj.get("density", 0.0)),
                   cell_size=float(obj.get("cell_size", 1.0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "World":
        return cls.from_json(json.loads(Path(path).read_text()))


def free_space_connected(grid: np.ndarray) -> bool:
    """True when the free cells form one 4-connected component.

    With diagonal corner-cutting forbidden, 4-connectivity is exactly the
    reachability relation of the 8-connected planner.
    """
    free = np.argwhere(~grid)
    if len(free) == 0:
        return False
    seen = np.zeros_like(grid, dtype=bool)
    stack = [tuple(free[0])]
    seen[stack[0]] = True
    count = 0
    while stack:
        ix, iy = stack.pop()
        count += 1
        for nx, ny in ((ix + 1, iy), (ix - 1, iy), (ix, iy + 1), (ix, iy - 1)):
            if not grid[nx, ny] and not seen[nx, ny]:
                seen[nx, ny] = True
                stack.append((nx, ny))
    return count == len(free)


def generate_world(seed: int, size: int = 16, obstacle_density: float = 0.2, cell_size: float = 1.0) -> World:
    """Random interior obstacles inside a solid border, regenerated until connected."""
    if size < 4:
        raise ValueError("size must be at least 4")
    if not 0.0 <= obstacle_density <= 0.5:
        raise ValueError("obstacle_density must lie in [0, 0.5]")
    for attempt in range(MAX_WORLD_RETRIES):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, attempt])
        grid = np.ones((size, size), dtype=bool)
        grid[1:-1, 1:-1] = rng.random((size - 2, size - 2)) < obstacle_density
        if free_space_connected(grid) and (~grid).sum() >= 2:
            return World(grid=grid, seed=int(seed), density=float(obstacle_density), cell_size=cell_size)
    raise WorldGenerationError(
        f"no connected world after {MAX_WORLD_RETRIES} attempts (seed={seed}, size={size}, density={obstacle_density})"
    )
