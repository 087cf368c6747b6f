"""Closed-loop rollouts and SR/SPL reporting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
import torch

from .geometry import relative_pose
from .model import NavigationModel, images_to_tensor
from .sim.motion import DEFAULT_MAX_STEP, expert_poses, step
from .sim.render import render
from .sim.tasks import LEVELS, EvalTask
from .sim.world import World

DEFAULT_BUDGET = 100
DEFAULT_GOAL_RADIUS = 1.0


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    oracle_dist: float
    steps: int
    difficulty: str = ""
    final_pose: tuple[float, float, float] | None = None

    @property
    def spl_term(self) -> float:
        """``S * d / p`` with ``d / p`` clamped to 1 and ``p = 0`` successes scored 1."""
        if not self.success:
            return 0.0
        if self.path_length <= 0.0:
            return 1.0
        return min(1.0, self.oracle_dist / self.path_length)


@dataclass
class EvalReport:
    bins: dict[str, dict[str, float]]
    overall: dict[str, float]
    n_tasks: int
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def average_sr(self) -> float:
        """Mean SR over the difficulty levels present."""
        return float(np.mean([b["SR"] for b in self.bins.values()]))

    def to_json(self) -> dict[str, Any]:
        return {"bins": self.bins, "overall": self.overall, "n_tasks": self.n_tasks,
                "average_SR": self.average_sr, "config": self.config}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["difficulty", "n", "SR", "SPL"])
            for name, b in [*self.bins.items(), ("Overall", self.overall)]:
                w.writerow([name, b["n"], b["SR"], b["SPL"]])


class Policy(Protocol):
    def reset(self, world: World, task: EvalTask) -> Any: ...

    def act(self, obs: np.ndarray, goal: np.ndarray, states: list) -> list[np.ndarray]: ...


class ModelPolicy:
    """Executes the first predicted waypoint (receding horizon).

    The model works in normalised units; ``action_scale`` converts its planar
    outputs back to world units (the inverse of the dataset scale).
    """

    def __init__(self, model: NavigationModel, action_scale: float = 1.0, waypoint_index: int = 0):
        self.model = model.eval()
        self.action_scale = float(action_scale)
        self.waypoint_index = waypoint_index

    def reset(self, world, task):
        return None

    @torch.no_grad()
    def act(self, obs, goal, states):
        dtype = next(self.model.parameters()).dtype
        out = self.model(images_to_tensor(obs, dtype), images_to_tensor(goal, dtype))
        a = out.waypoints[:, self.waypoint_index].double().numpy().copy()
        a[:, :2] *= self.action_scale
        return list(a)


class ExpertReplayPolicy:
    """Replays the expert rotate-then-translate actions; ignores images."""

    def reset(self, world, task):
        goal_cell = world.cell_of(task.goal.x, task.goal.y)
        return {"poses": expert_poses(world, task.start, goal_cell), "i": 0}

    def act(self, obs, goal, states):
        actions = []
        for s in states:
            poses, i = s["poses"], s["i"]
            if i + 1 < len(poses):
                actions.append(relative_pose(poses[i], poses[i + 1]).encode().as_array())
            else:
                actions.append(np.array([0.0, 0.0, 1.0, 0.0]))
            s["i"] = i + 1
        return actions


class RandomPolicy:
    """Uniform random planar motion within the step bound and a uniform turn."""

    def __init__(self, seed: int = 0, max_step: float = DEFAULT_MAX_STEP):
        self.seed = seed
        self.max_step = max_step
        self._n = 0

    def reset(self, world, task):
        self._n += 1
        return np.random.default_rng([self.seed, self._n])

    def act(self, obs, goal, states):
        out = []
        for rng in states:
            dx, dy = rng.uniform(-self.max_step, self.max_step, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            out.append(np.array([dx, dy, math.cos(yaw), math.sin(yaw)]))
        return out


def rollout(
    policy: Policy,
    world: World,
    tasks: Sequence[EvalTask],
    budget: int = DEFAULT_BUDGET,
    goal_radius: float = DEFAULT_GOAL_RADIUS,
    image_size: int = 64,
    fov: float = math.pi / 2,
    max_step: float = DEFAULT_MAX_STEP,
) -> list[EpisodeResult]:
    """Run all ``tasks`` in lock-step so the policy sees batches."""
    n = len(tasks)
    states = [policy.reset(world, t) for t in tasks]
    goals = np.stack([render(world, t.goal, image_size, image_size, fov) for t in tasks]) if n else None
    poses = [t.start for t in tasks]
    path = [0.0] * n
    steps = [0] * n
    success = [math.hypot(t.start.x - t.goal.x, t.start.y - t.goal.y) <= goal_radius for t in tasks]
    active = [i for i in range(n) if not success[i]]
    for _ in range(budget):
        if not active:
            break
        obs = np.stack([render(world, poses[i], image_size, image_size, fov) for i in active])
        actions = policy.act(obs, goals[active], [states[i] for i in active])
        still = []
        for i, a in zip(active, actions):
            new = step(world, poses[i], a, max_step)
            path[i] += math.hypot(new.x - poses[i].x, new.y - poses[i].y)
            poses[i] = new
            steps[i] += 1
            g = tasks[i].goal
            if math.hypot(new.x - g.x, new.y - g.y) <= goal_radius:
                success[i] = True
            else:
                still.append(i)
        active = still
    return [
        EpisodeResult(success[i], path[i], tasks[i].oracle_dist, steps[i], tasks[i].difficulty, tuple(poses[i]))
        for i in range(n)
    ]


def run_episode(policy: Policy, world: World, task: EvalTask, budget: int = DEFAULT_BUDGET,
                goal_radius: float = DEFAULT_GOAL_RADIUS, **kwargs) -> EpisodeResult:
    return rollout(policy, world, [task], budget, goal_radius, **kwargs)[0]


def _summary(results: Sequence[EpisodeResult]) -> dict[str, float]:
    n = len(results)
    return {
        "n": n,
        "SR": float(sum(r.success for r in results)) / n,
        "SPL": float(sum(r.spl_term for r in results)) / n,
    }


def compute_metrics(results: Sequence[EpisodeResult], config: Mapping[str, Any] | None = None) -> EvalReport:
    """SR and SPL overall and per difficulty level."""
    if not results:
        raise ValueError("compute_metrics needs at least one result")
    bins = {}
    for level in [*LEVELS, *sorted({r.difficulty for r in results} - set(LEVELS))]:
        sel = [r for r in results if r.difficulty == level]
        if sel:
            bins[level] = _summary(sel)
    return EvalReport(bins=bins, overall=_summary(results), n_tasks=len(results), config=dict(config or {}))


def evaluate(
    policy: Policy | NavigationModel,
    world: World,
    tasks: Sequence[EvalTask],
    budget: int = DEFAULT_BUDGET,
    goal_radius: float = DEFAULT_GOAL_RADIUS,
    action_scale: float = 1.0,
    config: Mapping[str, Any] | None = None,
    image_size: int | None = None,
) -> EvalReport:
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    if isinstance(policy, NavigationModel):
        image_size = image_size or policy.cfg.image_size
        policy = ModelPolicy(policy, action_scale)
    results = rollout(policy, world, tasks, budget, goal_radius, image_size=image_size or 64)
    snap = {"budget": budget, "goal_radius": goal_radius, "n_tasks": len(tasks), **(config or {})}
    return compute_metrics(results, snap)
