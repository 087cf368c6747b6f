"""Losses, training/fine-tuning loops and validation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .data import Episode, FrameBank, SampleSet
from .model import ModelOutputs, NavigationModel, build_model, images_to_tensor, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TERMS = ("L_way", "L_rel", "L_dist", "L_glob")
CURVE_COLUMNS = ("step", "total", *TERMS)

# Auxiliary-loss ablation rows, in table order.
ABLATION_ROWS = {
    "Waypoint Only": "waypoint_only",
    "No Goal": "no_goal",
    "No Distance": "no_distance",
    "No Global": "no_global",
    "All": "all",
}


class Batch(NamedTuple):
    obs: torch.Tensor
    goal: torch.Tensor
    waypoints: torch.Tensor
    rel_goal: torch.Tensor
    nav_dist: torch.Tensor
    global_path: torch.Tensor


def make_batch(samples: SampleSet, idx: np.ndarray | None = None, dtype: torch.dtype = torch.float32) -> Batch:
    if idx is None:
        idx = np.arange(len(samples))
    return Batch(
        obs=images_to_tensor(samples.frames[samples.obs_idx[idx]], dtype),
        goal=images_to_tensor(samples.frames[samples.goal_idx[idx]], dtype),
        waypoints=torch.as_tensor(samples.waypoints[idx], dtype=dtype),
        rel_goal=torch.as_tensor(samples.rel_goal[idx], dtype=dtype),
        nav_dist=torch.as_tensor(samples.nav_dist[idx], dtype=dtype),
        global_path=torch.as_tensor(samples.global_path[idx], dtype=dtype),
    )


# ------------------------------------------------------------------ losses


def pose_yaw_sq(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Position-yaw discrepancy over the last (size-4) axis."""
    return ((pred - target) ** 2).sum(dim=-1)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def waypoint_loss(out: ModelOutputs, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    return _reduce(pose_yaw_sq(out.waypoints, batch.waypoints).sum(dim=-1), reduction)


def relative_loss(out: ModelOutputs, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    return _reduce(pose_yaw_sq(out.rel_goal, batch.rel_goal), reduction)


def distance_loss(out: ModelOutputs, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    return _reduce((out.nav_dist - batch.nav_dist) ** 2, reduction)


def global_loss(out: ModelOutputs, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    return _reduce(pose_yaw_sq(out.global_path, batch.global_path).sum(dim=-1), reduction)


_LOSS_FNS = {"L_way": waypoint_loss, "L_rel": relative_loss, "L_dist": distance_loss, "L_glob": global_loss}


@dataclass
class LossWeights:
    """Per-term weights plus on/off switches for the auxiliary terms."""

    w_waypoint: float = 1.0
    w_relative: float = 1.0
    w_distance: float = 1.0
    w_global: float = 1.0
    use_relative: bool = True
    use_distance: bool = True
    use_global: bool = True

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        key = ABLATION_ROWS.get(name, name)
        presets = {
            "all": cls(),
            "waypoint_only": cls(use_relative=False, use_distance=False, use_global=False),
            "no_goal": cls(use_relative=False),
            "no_distance": cls(use_distance=False),
            "no_global": cls(use_global=False),
        }
        if key not in presets:
            raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(presets)}")
        return presets[key]

    def effective(self) -> dict[str, float]:
        w = {
            "L_way": self.w_waypoint,
            "L_rel": self.w_relative if self.use_relative else 0.0,
            "L_dist": self.w_distance if self.use_distance else 0.0,
            "L_glob": self.w_global if self.use_global else 0.0,
        }
        if any(v < 0 for v in w.values()):
            raise ValueError("loss weights must be non-negative")
        return w


def total_loss(out: ModelOutputs, batch: Batch, w: LossWeights | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled terms and a per-term breakdown.

    Disabled (zero-weight) terms are left out of the sum altogether, so they
    cannot leak gradients or NaNs; their values are still reported.
    """
    weights = (w or LossWeights()).effective()
    if all(v == 0.0 for v in weights.values()):
        raise ValueError("all loss weights are zero")
    total = None
    breakdown = {}
    for name, fn in _LOSS_FNS.items():
        if weights[name] == 0.0:
            with torch.no_grad():
                breakdown[name] = float(fn(out, batch))
            continue
        term = fn(out, batch)
        breakdown[name] = float(term.detach())
        total = weights[name] * term if total is None else total + weights[name] * term
    return total, breakdown


# ------------------------------------------------------------------ config


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    pairs_per_episode: int = 8
    T_min: int = 5
    T_max: int = 64
    checkpoint_every: int = 0
    log_every: int = 1
    grad_clip: float | None = None
    nav_exponent: float = 1.0
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    val_every: int = 0
    device: str = "cpu"

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.lr_schedule == "cosine" and self.max_steps is None:
            raise ValueError("the cosine schedule needs max_steps")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.val_every < 0:
            raise ValueError("val_every must be non-negative")
        return self

    def lr_factor(self, step: int) -> float:
        """Multiplier on ``learning_rate`` before optimiser step ``step`` (0-based)."""
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        if self.lr_schedule == "cosine":
            span = max(self.max_steps - self.warmup_steps, 1)
            return 0.5 * (1.0 + math.cos(math.pi * min(step - self.warmup_steps, span) / span))
        return 1.0

    @classmethod
    def published(cls, **overrides) -> "TrainConfig":
        """Full-scale hyper-parameters: Adam, lr 5e-5, batch 128, 200 epochs."""
        return replace(cls(learning_rate=5e-5, batch_size=128, epochs=200), **overrides)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainResult:
    model: torch.nn.Module
    curve: list[dict[str, float]]
    checkpoint: Path | None = None
    steps: int = 0
    header: dict[str, Any] = field(default_factory=dict)
    best_val: float | None = None
    best_step: int | None = None


def write_curve_csv(path: str | Path, rows: Sequence[Mapping[str, float]]) -> Path:
    path = Path(path)
    columns = list(rows[0]) if rows else list(CURVE_COLUMNS)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (int(r[k]) if k == "step" else repr(float(r[k]))) for k in columns})
    return path


def _epoch_samples(data, rng: np.random.Generator, cfg: TrainConfig, bank: FrameBank | None) -> SampleSet:
    if bank is not None:
        return bank.draw(rng, cfg.pairs_per_episode, cfg.T_min, cfg.T_max, nav_exponent=cfg.nav_exponent)
    return data


def fit(
    model: torch.nn.Module,
    data: Sequence[Episode] | SampleSet,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    out_dir: str | Path | None = None,
    header: Mapping[str, Any] | None = None,
    loss_fn=None,
    batch_fn=None,
    val_fn=None,
) -> TrainResult:
    """Adam on the weighted loss; shared by navigation and IDM training.

    ``data`` is either a fixed :class:`SampleSet` or a list of episodes from
    which fresh (obs, goal) windows are drawn every epoch. Everything random
    flows from ``cfg.seed``. With ``cfg.val_every > 0`` and a ``val_fn``
    (model -> validation loss), the model is scored every ``val_every`` steps
    and after the last step, and the best-scoring weights are restored.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("empty training set")
    # Episode lists are re-windowed every epoch; anything else is a fixed set.
    bank = FrameBank(data) if isinstance(data, (list, tuple)) else None
    weights = weights or LossWeights()
    loss_fn = loss_fn or (lambda m, b: total_loss(m(b.obs, b.goal), b, weights))
    batch_fn = batch_fn or make_batch
    dtype = next(model.parameters()).dtype
    model.to(cfg.device)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cfg.lr_factor)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    hdr = {"seed": cfg.seed, "train_config": asdict(cfg), "loss_weights": asdict(weights), **(header or {})}
    curve: list[dict[str, float]] = []
    step = 0
    done = False
    keep_best = bool(cfg.val_every and val_fn is not None)
    best: tuple[float, int, dict[str, torch.Tensor]] | None = None

    def score() -> None:
        nonlocal best
        v = float(val_fn(model))
        model.train()
        if best is None or v < best[0]:
            best = (v, step, {k: t.detach().clone() for k, t in model.state_dict().items()})

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        samples = _epoch_samples(data, rng, cfg, bank)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = batch_fn(samples, order[start : start + cfg.batch_size], dtype)
            batch = type(batch)(*(t.to(cfg.device) for t in batch))
            loss, parts = loss_fn(model, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            if step % cfg.log_every == 0 or step == 1:
                curve.append({"step": step, "total": float(loss.detach()), **parts})
            if keep_best and step % cfg.val_every == 0:
                score()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        log.info("epoch %d step %d loss %.5f", epoch, step, curve[-1]["total"] if curve else math.nan)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and not done:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.safetensors", model,
                            {**hdr, "step": step, "epoch": epoch})
        if done:
            break
    if keep_best:
        if step % cfg.val_every:
            score()
        model.load_state_dict(best[2])
        hdr.update(best_val=best[0], best_step=best[1])
    model.eval()
    hdr.update(step=step)
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "checkpoint.safetensors", model, hdr)
        write_curve_csv(out_dir / "loss.csv", curve)
    return TrainResult(model=model, curve=curve, checkpoint=ckpt, steps=step, header=hdr,
                       best_val=best[0] if keep_best else None, best_step=best[1] if keep_best else None)


def train(
    model: NavigationModel,
    dataset: Sequence[Episode] | SampleSet,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    out_dir: str | Path | None = None,
    header: Mapping[str, Any] | None = None,
    val_fn=None,
) -> TrainResult:
    return fit(model, dataset, cfg, weights, out_dir, header, val_fn=val_fn)


def subsample_episodes(episodes: Sequence[Episode], fraction: float, seed: int) -> list[Episode]:
    """Keep ``round(fraction * n)`` whole episodes chosen by ``seed``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = int(round(fraction * len(episodes)))
    if n == 0:
        raise ValueError(f"fraction {fraction} of {len(episodes)} episodes selects none")
    idx = np.sort(np.random.default_rng(seed).choice(len(episodes), size=n, replace=False))
    return [episodes[i] for i in idx]


def finetune(
    checkpoint: str | Path | None,
    dataset: Sequence[Episode],
    fraction: float,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    out_dir: str | Path | None = None,
    model_config=None,
    header: Mapping[str, Any] | None = None,
    val_fn=None,
) -> TrainResult:
    """Train from ``checkpoint`` (or from scratch when ``None``) on a fraction of the episodes."""
    subset = subsample_episodes(dataset, fraction, cfg.seed)
    if checkpoint is not None:
        model, base = load_checkpoint(checkpoint)
        init = str(checkpoint)
    else:
        if model_config is None:
            raise ValueError("model_config is required when training from scratch")
        model, base = build_model(model_config, seed=cfg.seed), {}
        init = "scratch"
    extra = {k: base[k] for k in ("scale",) if k in base}
    extra.update(header or {})
    extra.update(fraction=fraction, n_episodes=len(subset), init=init)
    return fit(model, subset, cfg, weights, out_dir, extra, val_fn=val_fn)


@torch.no_grad()
def validate(
    model: torch.nn.Module | str | Path,
    val: Sequence[Episode] | SampleSet,
    weights: LossWeights | None = None,
    seed: int = 0,
    pairs_per_episode: int = 8,
    T_min: int = 5,
    T_max: int = 64,
    batch_size: int = 64,
    nav_exponent: float = 1.0,
) -> dict[str, float]:
    """Mean total loss and per-term means over a fixed draw of validation windows."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)[0]
    if isinstance(val, SampleSet):
        samples = val
    else:
        if not val:
            raise ValueError("empty validation split")
        samples = FrameBank(val).draw(np.random.default_rng(seed), pairs_per_episode, T_min, T_max,
                                      nav_exponent=nav_exponent)
    if len(samples) == 0:
        raise ValueError("empty validation split")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    eff = (weights or LossWeights()).effective()
    sums = dict.fromkeys(TERMS, 0.0)
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        batch = make_batch(samples, idx, dtype)
        out = model(batch.obs, batch.goal)
        for name, fn in _LOSS_FNS.items():
            sums[name] += float(fn(out, batch, reduction="sum"))
    model.train(was_training)
    means = {k: v / len(samples) for k, v in sums.items()}
    means["total"] = sum(eff[k] * means[k] for k in TERMS)
    return means
