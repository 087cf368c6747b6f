"""Ablation grids and data-efficiency curves built on train + evaluate."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .data import Episode
from .evaluation import evaluate
from .model import ModelConfig, build_model, load_encoder_weights
from .sim.tasks import LEVELS, EvalTask
from .sim.world import World
from .training import ABLATION_ROWS, LossWeights, TrainConfig, finetune, fit, validate

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (1.0, 0.5, 0.25, 0.125, 0.0625)
VARIANT_ROWS = {"non_fusion": "Non-Fuse", "early_fusion": "Early Fuse"}


@dataclass
class AblationGrid:
    """Cartesian product of the three ablation axes.

    ``encoder_init`` entries are ``"raw"`` or a checkpoint path whose encoder
    tensors seed the model; ``losses`` entries are loss-preset names.
    """

    variant: Sequence[str] = ("early_fusion",)
    encoder_init: Sequence[str] = ("raw",)
    losses: Sequence[str] = ("all",)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AblationGrid":
        unknown = set(d) - {"variant", "encoder_init", "losses"}
        if unknown:
            raise ValueError(f"unknown ablation grid keys: {sorted(unknown)}")
        grid = cls(**{k: list(v) for k, v in d.items()})
        for name in grid.losses:
            LossWeights.preset(name)
        return grid

    def cells(self):
        return itertools.product(self.variant, self.encoder_init, self.losses)


def _loss_row_name(preset: str) -> str:
    inverse = {v: k for k, v in ABLATION_ROWS.items()}
    return preset if preset in ABLATION_ROWS else inverse.get(preset, preset)


def _report_row(report) -> dict[str, float]:
    row = {}
    for level in LEVELS:
        if level in report.bins:
            row[f"{level}_SR"] = report.bins[level]["SR"]
            row[f"{level}_SPL"] = report.bins[level]["SPL"]
    row["SR"] = report.overall["SR"]
    row["SPL"] = report.overall["SPL"]
    row["avg_SR"] = report.average_sr
    return row


def run_ablations(
    train_episodes: Sequence[Episode],
    world: World,
    tasks: Sequence[EvalTask],
    grid: AblationGrid,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    scale: float = 1.0,
    budget: int = 100,
    goal_radius: float = 1.0,
    val_episodes: Sequence[Episode] | None = None,
) -> list[dict[str, Any]]:
    """Train and evaluate one model per grid cell with identical seeds and data.

    Rows carry a display name in the style of the published ablation tables.
    Outcomes are recorded only; nothing here asserts an ordering.
    """
    rows = []
    for variant, init, losses in grid.cells():
        cfg = replace(model_cfg, variant=variant)
        model = build_model(cfg, seed=train_cfg.seed)
        if init != "raw":
            report = load_encoder_weights(model, init, strict=False)
            log.info("encoder init from %s: %d loaded, %d skipped", init, len(report.loaded), len(report.skipped))
        weights = LossWeights.preset(losses)
        result = fit(model, list(train_episodes), train_cfg, weights, header={"scale": scale})
        report = evaluate(result.model, world, tasks, budget, goal_radius, action_scale=1.0 / scale)
        row = {
            "name": f"{VARIANT_ROWS.get(variant, variant)} / {init} / {_loss_row_name(losses)}",
            "variant": variant,
            "encoder_init": init,
            "losses": _loss_row_name(losses),
            "final_train_loss": result.curve[-1]["total"],
            **_report_row(report),
        }
        if val_episodes:
            row["val_loss"] = validate(result.model, val_episodes, weights,
                                       T_min=train_cfg.T_min, T_max=train_cfg.T_max)["total"]
        rows.append(row)
    return rows


def write_table(rows: Sequence[Mapping[str, Any]], path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``."""
    stem = Path(path_stem)
    columns = list(dict.fromkeys(k for r in rows for k in r))
    csv_path = stem.with_suffix(".csv")
    with csv_path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(list(rows), indent=1))
    return csv_path, json_path


def data_efficiency_curve(
    checkpoint: str | Path | None,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    world: World | None,
    tasks: Sequence[EvalTask] | None,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    scale: float = 1.0,
    budget: int = 100,
    goal_radius: float = 1.0,
    label: str | None = None,
) -> list[dict[str, Any]]:
    """One record per fraction: fine-tuned (or scratch) validation loss and average SR.

    Episodes, not frames, are subsampled. When ``world``/``tasks`` are
    omitted only validation loss is recorded. ``train_cfg.val_every > 0``
    keeps the weights with the lowest validation loss seen during training,
    for every fraction and both initialisations alike.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    label = label or ("pretrained" if checkpoint is not None else "scratch")
    records = []

    def val_loss(m) -> float:
        return validate(m, val_episodes, T_min=train_cfg.T_min, T_max=train_cfg.T_max)["total"]

    for f in fractions:
        res = finetune(checkpoint, list(train_episodes), f, train_cfg, model_config=model_cfg, header={"scale": scale},
                       val_fn=val_loss)
        val = validate(res.model, val_episodes, T_min=train_cfg.T_min, T_max=train_cfg.T_max)
        rec = {"init": label, "fraction": f, "n_episodes": res.header["n_episodes"], "val_loss": val["total"],
               "avg_SR": float("nan")}
        if world is not None and tasks:
            rec["avg_SR"] = evaluate(res.model, world, tasks, budget, goal_radius, action_scale=1.0 / scale).average_sr
        log.info("curve %s fraction %.4f: val %.4f avg SR %.3f", label, f, rec["val_loss"], rec["avg_SR"])
        records.append(rec)
    return records


def write_curve(records: Sequence[Mapping[str, Any]], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``curve.csv`` and a two-panel ``curve.png`` (val loss, average SR)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    csv_path = out_dir / "curve.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["init", "fraction", "n_episodes", "val_loss", "avg_SR"])
        w.writeheader()
        w.writerows(records)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for init in dict.fromkeys(r["init"] for r in records):
        sel = sorted((r for r in records if r["init"] == init), key=lambda r: r["fraction"])
        xs = [r["fraction"] for r in sel]
        axes[0].plot(xs, [r["val_loss"] for r in sel], marker="o", label=init)
        axes[1].plot(xs, [r["avg_SR"] for r in sel], marker="o", label=init)
    for ax, title in zip(axes, ("validation loss", "average SR")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("fine-tuning fraction")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    png_path = out_dir / "curve.png"
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return csv_path, png_path
