import csv
import json
import math

import pytest

from goalnav.experiments import AblationGrid, data_efficiency_curve, run_ablations, write_curve, write_table
from goalnav.model import build_model, save_checkpoint
from goalnav.sim import gen_expert_dataset, sample_tasks
from goalnav.training import ABLATION_ROWS, TrainConfig

CFG = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=1, T_min=1, T_max=8, pairs_per_episode=2)


@pytest.fixture(scope="module")
def setup(world16):
    eps = gen_expert_dataset(world16, 16, seed=0, height=16, width=16)
    tasks = sample_tasks(world16, 1, seed=0)
    return eps, tasks


def test_grid_validation():
    g = AblationGrid.from_dict({"variant": ["early_fusion", "non_fusion"], "losses": list(ABLATION_ROWS)})
    assert len(list(g.cells())) == 10
    with pytest.raises(ValueError):
        AblationGrid.from_dict({"loss": ["all"]})
    with pytest.raises(ValueError):
        AblationGrid.from_dict({"losses": ["everything"]})


def test_five_loss_rows(setup, world16, tiny_cfg, tmp_path):
    eps, tasks = setup
    grid = AblationGrid(losses=list(ABLATION_ROWS))
    rows = run_ablations(eps, world16, tasks, grid, tiny_cfg, CFG, budget=3, val_episodes=eps[:4])
    assert [r["losses"] for r in rows] == list(ABLATION_ROWS)
    for r in rows:
        assert 0.0 <= r["SPL"] <= r["SR"] <= 1.0
        assert math.isfinite(r["final_train_loss"]) and math.isfinite(r["val_loss"])
        assert r["name"].startswith("Early Fuse / raw / ")
    csv_path, json_path = write_table(rows, tmp_path / "t")
    assert len(list(csv.DictReader(open(csv_path)))) == 5
    assert json.loads(json_path.read_text()) == rows


def test_encoder_init_from_checkpoint(setup, world16, tiny_cfg, tmp_path):
    eps, tasks = setup
    ckpt = save_checkpoint(tmp_path / "src.safetensors", build_model(tiny_cfg, seed=9))
    rows = run_ablations(eps, world16, tasks, AblationGrid(encoder_init=["raw", str(ckpt)]), tiny_cfg, CFG,
                         budget=2)
    assert [r["encoder_init"] for r in rows] == ["raw", str(ckpt)]


def test_curve_records_and_plot(setup, world16, tiny_cfg, tmp_path):
    eps, tasks = setup
    ckpt = save_checkpoint(tmp_path / "p.safetensors", build_model(tiny_cfg, seed=1))
    recs = data_efficiency_curve(ckpt, eps, eps[:4], world16, tasks, CFG, budget=2)
    recs += data_efficiency_curve(None, eps, eps[:4], None, None, CFG, tiny_cfg)
    assert [r["init"] for r in recs] == ["pretrained"] * 5 + ["scratch"] * 5
    assert [r["n_episodes"] for r in recs[:5]] == [16, 8, 4, 2, 1]
    assert all(math.isfinite(r["avg_SR"]) for r in recs[:5])
    assert all(math.isnan(r["avg_SR"]) for r in recs[5:])
    csv_path, png = write_curve(recs, tmp_path)
    assert len(list(csv.DictReader(open(csv_path)))) == 10
    assert png.read_bytes()[:4] == b"\x89PNG"
    with pytest.raises(ValueError):
        data_efficiency_curve(None, eps, eps, None, None, CFG, tiny_cfg, fractions=[0.0])
