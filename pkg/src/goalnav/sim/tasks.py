"""Evaluation task sampling binned by oracle path length."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import Pose
from .planning import distance_field, shortest_path_cells
from .world import World

LEVELS = ("Easy", "Medium", "Hard")


class TaskSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalTask:
    start: Pose
    goal: Pose
    oracle_dist: float
    difficulty: str

    def to_json(self) -> dict:
        return {
            "start": list(self.start),
            "goal": list(self.goal),
            "oracle_dist": self.oracle_dist,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalTask":
        if obj["difficulty"] not in LEVELS:
            raise ValueError(f"unknown difficulty {obj['difficulty']!r}")
        return cls(Pose(*obj["start"]), Pose(*obj["goal"]), float(obj["oracle_dist"]), obj["difficulty"])


def difficulty_of(dist_cells: float, thresholds: tuple[float, float] = (8, 16)) -> str:
    easy, medium = thresholds
    if dist_cells <= easy:
        return "Easy"
    if dist_cells <= medium:
        return "Medium"
    return "Hard"


def arrival_heading(world: World, start_cell, goal_cell) -> float:
    """Heading of the last segment of the shortest path into ``goal_cell``."""
    cells = shortest_path_cells(world, start_cell, goal_cell).cells
    (ax, ay), (bx, by) = cells[-2], cells[-1]
    return math.atan2(by - ay, bx - ax)


def sample_tasks(
    world: World,
    n_per_level: int,
    thresholds: tuple[float, float] = (8, 16),
    seed: int = 0,
    max_tries: int | None = None,
) -> list[EvalTask]:
    """Rejection-sample start/goal pairs until every level holds ``n_per_level`` tasks.

    Starts sit at free cell centres with uniform heading. Goals sit at cell
    centres facing the direction the shortest path arrives from, which is how
    an expert would see the goal on arrival. Thresholds are in cells.
    """
    if n_per_level < 0:
        raise ValueError("n_per_level must be non-negative")
    rng = np.random.default_rng(seed)
    cells = world.free_cells()
    fields: dict[tuple[int, int], np.ndarray] = {}
    buckets: dict[str, list[EvalTask]] = {lv: [] for lv in LEVELS}
    budget = max_tries if max_tries is not None else 2000 * max(n_per_level, 1) + 10000
    for _ in range(budget):
        if all(len(b) >= n_per_level for b in buckets.values()):
            break
        s = cells[int(rng.integers(len(cells)))]
        g = cells[int(rng.integers(len(cells)))]
        yaw = float(rng.uniform(-math.pi, math.pi))
        if s == g:
            continue
        if g not in fields:
            fields[g] = distance_field(world, g)
        d = float(fields[g][s])
        if not math.isfinite(d):
            continue
        level = difficulty_of(d, thresholds)
        if len(buckets[level]) >= n_per_level:
            continue
        sx, sy = world.cell_center(s)
        gx, gy = world.cell_center(g)
        task = EvalTask(
            start=Pose(sx, sy, yaw),
            goal=Pose(gx, gy, arrival_heading(world, s, g)),
            oracle_dist=d * world.cell_size,
            difficulty=level,
        )
        buckets[level].append(task)
    for level in LEVELS:
        if len(buckets[level]) < n_per_level:
            raise TaskSamplingError(
                f"could only sample {len(buckets[level])}/{n_per_level} {level} tasks after {budget} tries"
            )
    return [t for level in LEVELS for t in buckets[level]]


def save_tasks(tasks: list[EvalTask], path: str | Path) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in tasks], indent=1))


def load_tasks(path: str | Path) -> list[EvalTask]:
    return [EvalTask.from_json(o) for o in json.loads(Path(path).read_text())]
