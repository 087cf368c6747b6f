import csv
import json
import math

import numpy as np
import pytest
import torch

from goalnav.evaluation import (
    EpisodeResult,
    ExpertReplayPolicy,
    ModelPolicy,
    RandomPolicy,
    compute_metrics,
    evaluate,
    rollout,
    run_episode,
)
from goalnav.geometry import Pose
from goalnav.model import build_model
from goalnav.sim import EvalTask, sample_tasks
from oracles import oracle_sr_spl


class ZeroPolicy:
    def reset(self, world, task):
        return None

    def act(self, obs, goal, states):
        return [np.array([0.0, 0.0, 1.0, 0.0]) for _ in states]


class ConstantModel(torch.nn.Module):
    """A stand-in navigation model whose first waypoint is fixed."""

    def __init__(self, action):
        super().__init__()
        self.action = torch.tensor(action, dtype=torch.float32)
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, obs, goal):
        b = obs.shape[0]
        way = self.action.repeat(b, 10, 1)
        return type("Out", (), {"waypoints": way})()


@pytest.fixture(scope="module")
def tasks(world16):
    return sample_tasks(world16, 10, seed=3)


# --------------------------------------------------------------- metrics


def test_spl_hand_case():
    r = [EpisodeResult(True, 4.0, 2.0, 10, "Easy"), EpisodeResult(False, 9.0, 3.0, 100, "Easy")]
    rep = compute_metrics(r)
    assert rep.overall["SR"] == 0.5
    assert rep.overall["SPL"] == 0.25
    assert rep.bins["Easy"]["n"] == 2


def test_spl_clamp_and_zero_path():
    assert EpisodeResult(True, 0.0, 0.5, 0).spl_term == 1.0
    assert EpisodeResult(True, 1.0, 2.0, 1).spl_term == 1.0
    assert EpisodeResult(False, 1.0, 2.0, 1).spl_term == 0.0
    rep = compute_metrics([EpisodeResult(True, d, d, 5, "Hard") for d in (1.0, 2.0, 3.0)])
    assert rep.overall["SR"] == rep.overall["SPL"] == 1.0


def test_metrics_match_oracle_and_spl_le_sr():
    rng = np.random.default_rng(0)
    levels = ["Easy", "Medium", "Hard"]
    results = []
    for i in range(150):
        d = float(rng.uniform(0.5, 20))
        p = float(rng.choice([0.0, rng.uniform(0.1, 40)]))
        results.append(EpisodeResult(bool(rng.random() < 0.6), p, d, int(rng.integers(0, 101)), levels[i % 3]))
    rep = compute_metrics(results)
    sr, spl = oracle_sr_spl([(r.success, r.oracle_dist, r.path_length) for r in results])
    assert abs(rep.overall["SR"] - sr) < 1e-12 and abs(rep.overall["SPL"] - spl) < 1e-12
    for level in levels:
        sel = [r for r in results if r.difficulty == level]
        sr, spl = oracle_sr_spl([(r.success, r.oracle_dist, r.path_length) for r in sel])
        b = rep.bins[level]
        assert abs(b["SR"] - sr) < 1e-12 and abs(b["SPL"] - spl) < 1e-12
        assert 0.0 <= b["SPL"] <= b["SR"] <= 1.0
    assert rep.average_sr == pytest.approx(np.mean([rep.bins[l]["SR"] for l in levels]))


def test_metrics_empty_errors():
    with pytest.raises(ValueError):
        compute_metrics([])


def test_report_files(tmp_path):
    rep = compute_metrics([EpisodeResult(True, 2.0, 2.0, 3, "Easy")], {"budget": 100})
    rep.save(tmp_path / "r.json")
    rep.save_csv(tmp_path / "r.csv")
    obj = json.loads((tmp_path / "r.json").read_text())
    assert obj["overall"]["SR"] == 1.0 and obj["config"] == {"budget": 100}
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["difficulty", "n", "SR", "SPL"] and rows[-1][0] == "Overall"


# --------------------------------------------------------------- rollouts


def test_start_within_radius_succeeds_at_step_zero(world16):
    cell = world16.free_cells()[5]
    p = Pose(*world16.cell_center(cell), 0.0)
    r = run_episode(ZeroPolicy(), world16, EvalTask(p, p, 0.5, "Easy"))
    assert r.success and r.steps == 0 and r.path_length == 0.0 and r.spl_term == 1.0


def test_zero_action_fails_after_budget(world16, tasks):
    far = [t for t in tasks if t.difficulty == "Hard"][0]
    r = run_episode(ZeroPolicy(), world16, far, budget=100)
    assert not r.success and r.steps == 100 and r.path_length == 0.0


def test_expert_replay_follows_oracle(world16, tasks):
    # with a vanishing radius the replay must walk the whole shortest path
    results = rollout(ExpertReplayPolicy(), world16, tasks, budget=200, goal_radius=1e-6)
    for r, t in zip(results, tasks):
        assert r.success
        assert abs(r.path_length - t.oracle_dist) < 1e-6
        assert abs(r.spl_term - 1.0) < 1e-6


def test_expert_replay_default_radius(world16, tasks):
    rep = evaluate(ExpertReplayPolicy(), world16, tasks)
    for b in rep.bins.values():
        assert b["SR"] == 1.0 and b["SPL"] >= 0.99


def test_path_at_least_displacement(world16, tasks):
    for r, t in zip(rollout(RandomPolicy(seed=1), world16, tasks, budget=30), tasks):
        disp = math.hypot(r.final_pose[0] - t.start.x, r.final_pose[1] - t.start.y)
        assert r.path_length >= disp - 1e-9
        assert r.steps <= 30


def test_random_policy_repeatable(world16, tasks):
    a = evaluate(RandomPolicy(seed=2), world16, tasks, budget=20)
    b = evaluate(RandomPolicy(seed=2), world16, tasks, budget=20)
    assert a.to_json() == b.to_json()


def test_model_policy_scales_actions(world16):
    policy = ModelPolicy(ConstantModel([2.0, 0.0, 1.0, 0.0]), action_scale=0.25)
    obs = np.zeros((1, 64, 64, 3), np.uint8)
    a = policy.act(obs, obs, [None])[0]
    np.testing.assert_allclose(a, [0.5, 0.0, 1.0, 0.0])


def test_evaluate_model_deterministic(world16, tiny_cfg, tasks):
    m = build_model(tiny_cfg, seed=0)
    a = evaluate(m, world16, tasks[:6], budget=5)
    b = evaluate(m, world16, tasks[:6], budget=5)
    assert a.to_json() == b.to_json()
    assert a.n_tasks == 6


def test_evaluate_requires_tasks(world16):
    with pytest.raises(ValueError):
        evaluate(ZeroPolicy(), world16, [])
