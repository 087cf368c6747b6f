"""Grid shortest paths: 8-connected, exact step costs, no corner cutting."""

from __future__ import annotations

import heapq
import math
from typing import NamedTuple

import numpy as np

from ..geometry import Pose
from .world import World

SQRT2 = math.sqrt(2.0)
_TIE = 1e-9
Cell = tuple[int, int]

# Fixed expansion order; together with (f, cell) heap keys this makes ties
# resolve by lexicographic cell order.
_MOVES = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class PathResult(NamedTuple):
    length: float
    cells: list[Cell]

    @property
    def reachable(self) -> bool:
        return math.isfinite(self.length)


UNREACHABLE = PathResult(math.inf, [])


def neighbors(world: World, cell: Cell):
    """Yield ``(neighbor, cost)`` pairs; diagonals need both side cells free."""
    ix, iy = cell
    for dx, dy in _MOVES:
        nb = (ix + dx, iy + dy)
        if not world.is_free_cell(nb):
            continue
        if dx and dy:
            if not (world.is_free_cell((ix + dx, iy)) and world.is_free_cell((ix, iy + dy))):
                continue
            yield nb, SQRT2
        else:
            yield nb, 1.0


def octile(a: Cell, b: Cell) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (SQRT2 - 1.0) * min(dx, dy) + max(dx, dy)


def shortest_path_cells(world: World, start: Cell, goal: Cell) -> PathResult:
    if not world.is_free_cell(start) or not world.is_free_cell(goal):
        raise ValueError(f"endpoints must be free cells, got {start} -> {goal}")
    if start == goal:
        return PathResult(0.0, [start])
    g = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    heap = [(octile(start, goal), start)]
    closed = set()
    while heap:
        _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = [cur]
            while cells[-1] != start:
                cells.append(parent[cells[-1]])
            cells.reverse()
            return PathResult(g[goal], cells)
        closed.add(cur)
        for nb, cost in neighbors(world, cur):
            if nb in closed:
                continue
            cand = g[cur] + cost
            if cand < g.get(nb, math.inf) - _TIE:
                g[nb] = cand
                parent[nb] = cur
                heapq.heappush(heap, (cand + octile(nb, goal), nb))
    return UNREACHABLE


def shortest_path(world: World, a: Pose, b: Pose) -> PathResult:
    """Shortest grid path between the cells containing ``a`` and ``b``.

    Lengths are in world units (``cell_size`` per straight step). Returns
    :data:`UNREACHABLE` when no path exists.
    """
    res = shortest_path_cells(world, world.cell_of(a.x, a.y), world.cell_of(b.x, b.y))
    if not res.reachable:
        return res
    return PathResult(res.length * world.cell_size, res.cells)


def distance_field(world: World, source: Cell) -> np.ndarray:
    """Dijkstra distances (in cells) from ``source`` to every cell; ``inf`` if unreachable."""
    dist = np.full(world.grid.shape, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, cur = heapq.heappop(heap)
        if d > dist[cur]:
            continue
        for nb, cost in neighbors(world, cur):
            nd = d + cost
            if nd < dist[nb] - _TIE:
                dist[nb] = nd
                heapq.heappush(heap, (nd, nb))
    return dist
