import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import random_walk
from goalnav.data import FrameBank
from goalnav.model import ModelConfig, ModelOutputs, build_model, load_checkpoint
from goalnav.training import (
    ABLATION_ROWS,
    Batch,
    LossWeights,
    TrainConfig,
    distance_loss,
    finetune,
    fit,
    global_loss,
    make_batch,
    relative_loss,
    subsample_episodes,
    total_loss,
    train,
    validate,
    waypoint_loss,
)
from oracles import central_difference_check, gradient_check_passes, oracle_losses


def random_outputs_and_batch(b, rng, dtype=torch.float64):
    def r(*shape):
        return torch.as_tensor(rng.normal(size=shape), dtype=dtype)

    out = ModelOutputs(r(b, 10, 4), r(b, 4), r(b), r(b, 10, 4))
    batch = Batch(r(b, 3, 2, 2), r(b, 3, 2, 2), r(b, 10, 4), r(b, 4), r(b).abs() * 5, r(b, 10, 4))
    return out, batch


def as_np(out, batch):
    pred = {k: getattr(out, k).numpy() for k in ModelOutputs._fields}
    label = {k: getattr(batch, k).numpy() for k in ("waypoints", "rel_goal", "nav_dist", "global_path")}
    return pred, label


# ------------------------------------------------------------------ losses


def test_loss_examples():
    b = 1
    label_way = torch.tensor([[0.0, 0.0, 1.0, 0.0]]).repeat(b, 10, 1)
    batch = Batch(None, None, label_way, torch.tensor([[0.0, 0, 1, 0]]), torch.tensor([5.0]), label_way)
    zeros = ModelOutputs(torch.zeros(b, 10, 4), torch.zeros(b, 4), torch.tensor([3.0]), torch.zeros(b, 10, 4))
    assert waypoint_loss(zeros, batch).item() == 10.0
    assert global_loss(zeros, batch).item() == 10.0
    assert relative_loss(zeros, batch).item() == 1.0
    assert distance_loss(zeros, batch).item() == 4.0
    exact = ModelOutputs(label_way, batch.rel_goal, batch.nav_dist, label_way)
    for fn in (waypoint_loss, relative_loss, distance_loss, global_loss):
        assert fn(exact, batch).item() == 0.0


def test_losses_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        out, batch = random_outputs_and_batch(int(rng.integers(1, 6)), rng)
        expect = oracle_losses(*as_np(out, batch))
        got = {
            "L_way": waypoint_loss(out, batch).item(),
            "L_rel": relative_loss(out, batch).item(),
            "L_dist": distance_loss(out, batch).item(),
            "L_glob": global_loss(out, batch).item(),
        }
        for k in expect:
            assert abs(got[k] - expect[k]) <= 1e-9 * max(1.0, abs(expect[k]))


def test_reductions():
    rng = np.random.default_rng(1)
    out, batch = random_outputs_and_batch(4, rng)
    per = waypoint_loss(out, batch, reduction="none")
    assert per.shape == (4,)
    assert torch.allclose(per.sum(), waypoint_loss(out, batch, reduction="sum"))
    with pytest.raises(ValueError):
        waypoint_loss(out, batch, reduction="max")


# ------------------------------------------------------------- total loss


def test_presets_match_table_rows():
    assert list(ABLATION_ROWS) == ["Waypoint Only", "No Goal", "No Distance", "No Global", "All"]
    for row, key in ABLATION_ROWS.items():
        assert LossWeights.preset(row) == LossWeights.preset(key)
    with pytest.raises(ValueError):
        LossWeights.preset("everything")


@pytest.mark.parametrize("row", list(ABLATION_ROWS))
def test_total_is_weighted_sum(row):
    rng = np.random.default_rng(2)
    out, batch = random_outputs_and_batch(3, rng)
    w = LossWeights.preset(row)
    total, parts = total_loss(out, batch, w)
    eff = w.effective()
    assert abs(total.item() - sum(eff[k] * parts[k] for k in parts)) < 1e-9
    assert set(parts) == {"L_way", "L_rel", "L_dist", "L_glob"}


def test_waypoint_only_equals_waypoint_loss():
    rng = np.random.default_rng(3)
    out, batch = random_outputs_and_batch(3, rng)
    total, _ = total_loss(out, batch, LossWeights.preset("Waypoint Only"))
    assert total.item() == waypoint_loss(out, batch).item()


def test_disabled_terms_contribute_exactly_zero():
    rng = np.random.default_rng(4)
    out, batch = random_outputs_and_batch(3, rng)
    base, _ = total_loss(out, batch, LossWeights.preset("No Distance"))
    wild = out._replace(nav_dist=out.nav_dist * 1e6 + 17)
    assert total_loss(wild, batch, LossWeights.preset("No Distance"))[0].item() == base.item()
    nan = out._replace(global_path=torch.full_like(out.global_path, float("nan")))
    assert torch.isfinite(total_loss(nan, batch, LossWeights.preset("No Global"))[0])


def test_all_weights_zero_errors():
    rng = np.random.default_rng(5)
    out, batch = random_outputs_and_batch(2, rng)
    w = LossWeights(w_waypoint=0.0, use_relative=False, use_distance=False, use_global=False)
    with pytest.raises(ValueError):
        total_loss(out, batch, w)
    with pytest.raises(ValueError):
        total_loss(out, batch, LossWeights(w_waypoint=-1.0))


def _samples(n_eps=6, n_pairs=4, size=16, seed=0, T_min=2, T_max=12):
    rng = np.random.default_rng(seed)
    eps = [random_walk(int(rng.integers(8, 20)), rng, size=size) for _ in range(n_eps)]
    return eps, FrameBank(eps).draw(np.random.default_rng(seed), n_pairs, T_min, T_max)


def test_no_goal_ignores_relative_head(tiny_cfg):
    _, ss = _samples()
    m = build_model(tiny_cfg).double()
    batch = make_batch(ss, dtype=torch.float64)
    w = LossWeights.preset("No Goal")
    before = total_loss(m(batch.obs, batch.goal), batch, w)[0].item()
    with torch.no_grad():
        for p in m.relative_head.parameters():
            p.zero_()
    assert total_loss(m(batch.obs, batch.goal), batch, w)[0].item() == before


def test_gradient_check_reduced_depth():
    torch.manual_seed(0)
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=3, heads=2, mlp_ratio=2, head_hidden=16)
    m = build_model(cfg, seed=0).double()
    _, ss = _samples(n_eps=2, n_pairs=2)
    batch = make_batch(ss, dtype=torch.float64)

    def loss_of(model):
        return total_loss(model(batch.obs, batch.goal), batch)[0]

    rel, diff, noise = central_difference_check(m, loss_of, n_params=100, h=1e-5)
    assert len(rel) == 100
    assert gradient_check_passes(rel, diff, noise), (rel.max(), diff.max(), noise)
    assert np.sum(rel <= 1e-4) >= 90  # only exactly-zero gradients may fall back on round-off


# ------------------------------------------------------------------ loops


def test_config_validation():
    for bad in (dict(learning_rate=0.0), dict(batch_size=0), dict(epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})
    p = TrainConfig.published()
    assert (p.learning_rate, p.batch_size, p.epochs) == (5e-5, 128, 200)


def test_overfit_fixed_set():
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=32, depth=2, heads=2, head_hidden=64)
    _, ss = _samples(n_eps=8, n_pairs=4)
    ss = ss.subset(np.arange(32))
    m = build_model(cfg, seed=0)
    res = fit(m, ss, TrainConfig(learning_rate=1e-3, batch_size=32, epochs=2000, log_every=100))
    assert res.steps == 2000
    assert res.curve[-1]["total"] < 1e-2
    assert res.curve[-1]["total"] < res.curve[0]["total"]
    trained = validate(m, ss)["total"]
    untrained = validate(build_model(cfg, seed=0), ss)["total"]
    assert trained < 1e-2 < untrained


def test_training_deterministic(tiny_cfg, tmp_path):
    eps, _ = _samples()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=2, T_min=2, T_max=10, pairs_per_episode=2)
    a = train(build_model(tiny_cfg, 1), eps, cfg)
    b = train(build_model(tiny_cfg, 1), eps, cfg)
    assert a.curve == b.curve
    c = train(build_model(tiny_cfg, 1), eps, replace(cfg, seed=1))
    assert a.curve != c.curve


def test_fit_writes_artifacts(tiny_cfg, tmp_path):
    eps, _ = _samples()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=3, T_min=2, T_max=10, pairs_per_episode=2,
                      checkpoint_every=1)
    res = train(build_model(tiny_cfg, 0), eps, cfg, out_dir=tmp_path, header={"scale": 0.7})
    assert res.checkpoint == tmp_path / "checkpoint.safetensors"
    with open(tmp_path / "loss.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["step", "total", "L_way", "L_rel", "L_dist", "L_glob"]
    assert len(rows) == res.steps
    model, header = load_checkpoint(res.checkpoint)
    assert header["scale"] == 0.7 and header["step"] == res.steps and header["seed"] == 0
    assert header["train_config"]["epochs"] == 3
    assert sorted(p.name for p in tmp_path.glob("checkpoint_epoch*")) == [
        f"checkpoint_epoch{i:04d}.safetensors" for i in (1, 2, 3)
    ]
    assert load_checkpoint(tmp_path / "checkpoint_epoch0002.safetensors")[1]["epoch"] == 2


def test_empty_data_errors(tiny_cfg):
    with pytest.raises(ValueError):
        train(build_model(tiny_cfg), [], TrainConfig())


def test_subsample_episodes():
    eps = [random_walk(3, np.random.default_rng(i), size=2) for i in range(100)]
    half = subsample_episodes(eps, 0.5, seed=0)
    assert len(half) == 50
    assert [id(e) for e in half] == [id(e) for e in subsample_episodes(eps, 0.5, seed=0)]
    assert len(subsample_episodes(eps, 1 / 16, seed=0)) == 6
    with pytest.raises(ValueError):
        subsample_episodes(eps[:3], 0.1, seed=0)
    with pytest.raises(ValueError):
        subsample_episodes(eps, 0.0, seed=0)


def test_finetune_from_checkpoint(tiny_cfg, tmp_path):
    eps, _ = _samples(n_eps=8)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=1, T_min=2, T_max=10, pairs_per_episode=2)
    base = train(build_model(tiny_cfg, 0), eps, cfg, out_dir=tmp_path / "base", header={"scale": 0.3})
    res = finetune(base.checkpoint, eps, 0.5, cfg, out_dir=tmp_path / "ft")
    assert res.header["n_episodes"] == 4 and res.header["scale"] == 0.3
    assert res.header["init"] == str(base.checkpoint)
    scratch = finetune(None, eps, 0.5, cfg, model_config=tiny_cfg)
    assert scratch.header["init"] == "scratch"
    with pytest.raises(ValueError):
        finetune(None, eps, 0.5, cfg)


def test_validate_repeatable_and_errors(tiny_cfg, tmp_path):
    eps, ss = _samples()
    m = build_model(tiny_cfg)
    a = validate(m, eps, T_min=2, T_max=10)
    assert a == validate(m, eps, T_min=2, T_max=10)
    assert set(a) == {"L_way", "L_rel", "L_dist", "L_glob", "total"}
    assert abs(a["total"] - sum(a[k] for k in ("L_way", "L_rel", "L_dist", "L_glob"))) < 1e-9
    with pytest.raises(ValueError):
        validate(m, [])


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1.0, max_steps=110, warmup_steps=10, lr_schedule="cosine")
    assert cfg.lr_factor(0) == pytest.approx(0.1) and cfg.lr_factor(9) == pytest.approx(1.0)
    assert cfg.lr_factor(10) == pytest.approx(1.0)
    assert cfg.lr_factor(60) == pytest.approx(0.5)
    assert cfg.lr_factor(110) == pytest.approx(0.0, abs=1e-12)
    assert TrainConfig().lr_factor(1000) == 1.0
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine").validate()
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step").validate()


def test_cosine_schedule_applied(tiny_cfg):
    eps, _ = _samples()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=50, max_steps=6, lr_schedule="cosine",
                      T_min=2, T_max=10)
    m = build_model(tiny_cfg, 0)
    seen = []
    orig = torch.optim.Adam.step

    def spy(self, *a, **k):
        seen.append(self.param_groups[0]["lr"])
        return orig(self, *a, **k)

    torch.optim.Adam.step = spy
    try:
        train(m, eps, cfg)
    finally:
        torch.optim.Adam.step = orig
    assert seen == pytest.approx([1e-3 * cfg.lr_factor(i) for i in range(6)])


def test_keep_best_restores_lowest_validation(tiny_cfg):
    eps, _ = _samples()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=50, max_steps=12, val_every=4, T_min=2, T_max=10)
    scores = iter([5.0, 1.0, 3.0])
    seen = {}

    def val_fn(m):
        v = next(scores)
        seen[v] = {k: t.clone() for k, t in m.state_dict().items()}
        return v

    res = train(build_model(tiny_cfg, 0), eps, cfg, val_fn=val_fn)
    assert (res.best_val, res.best_step) == (1.0, 8)
    assert res.header["best_step"] == 8
    for k, t in res.model.state_dict().items():
        assert torch.equal(t, seen[1.0][k])
    # Without a callback the option is inert.
    plain = train(build_model(tiny_cfg, 0), eps, cfg)
    assert plain.best_val is None and plain.steps == 12


def test_keep_best_scores_final_step(tiny_cfg):
    eps, _ = _samples()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=50, max_steps=10, val_every=4, T_min=2, T_max=10)
    steps = []
    res = train(build_model(tiny_cfg, 0), eps, cfg, val_fn=lambda m: steps.append(1) or 10.0 - len(steps))
    assert len(steps) == 3 and res.best_step == 10
