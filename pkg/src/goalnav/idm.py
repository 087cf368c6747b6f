"""Video labelling pipeline: clip segmentation, two-stage filtering, IDM annotation.

Frame sequences stand in for gameplay videos. A classifier decides which
clips are usable, and an inverse dynamics model (IDM) labels consecutive
frame pairs with ``[dx, dy, cos, sin]`` actions.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Protocol, Sequence

import numpy as np
import torch
from PIL import Image

from .data import Episode
from .geometry import relative_poses_array
from .model import InverseDynamicsModel, ModelConfig, build_model, images_to_tensor
from .training import TrainConfig, TrainResult, fit, pose_yaw_sq

log = logging.getLogger(__name__)

STAGE1_PROMPT = "If this video can be used in the construction of navigation task dataset, then return True, else return False."
STAGE2_PROMPT = (
    "If this video does not contain the interaction with game menu and this video measures the movement, "
    "then return True, else return False."
)


@dataclass
class VideoSegment:
    frames: np.ndarray
    fps: float = 30.0
    source_id: str = "video"
    index: int = 0
    gold: bool | None = None
    poses: np.ndarray | None = None

    @property
    def clip_id(self) -> str:
        return f"{self.source_id}#{self.index:04d}"

    def __len__(self) -> int:
        return len(self.frames)


def segment_video(
    frames: np.ndarray,
    fps_in: float,
    clip_seconds: float = 10.0,
    fps_out: float = 30.0,
    source_id: str = "video",
    min_remainder_seconds: float = 2.0,
    gold: bool | None = None,
    poses: np.ndarray | None = None,
) -> list[VideoSegment]:
    """Resample to ``fps_out`` (nearest frame) and cut fixed-length clips.

    A trailing clip shorter than ``clip_seconds`` is kept only if it lasts at
    least ``min_remainder_seconds``.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("empty frame sequence")
    n_in = len(frames)
    n_out = int(math.floor(n_in * fps_out / fps_in + 1e-9))
    idx = np.minimum(np.floor(np.arange(n_out) * (fps_in / fps_out) + 0.5).astype(np.int64), n_in - 1)
    clip_len = int(round(clip_seconds * fps_out))
    min_len = int(math.ceil(min_remainder_seconds * fps_out - 1e-9))
    out = []
    for k, start in enumerate(range(0, n_out, clip_len)):
        sel = idx[start : start + clip_len]
        if len(sel) < clip_len and len(sel) < min_len:
            break
        out.append(
            VideoSegment(
                frames=frames[sel],
                fps=fps_out,
                source_id=source_id,
                index=k,
                gold=gold,
                poses=None if poses is None else np.asarray(poses)[sel],
            )
        )
    return out


# ---------------------------------------------------------------- filtering


class SegmentClassifier(Protocol):
    def classify(self, segment: VideoSegment, prompt: str) -> bool: ...


class MotionEnergyClassifier:
    """Deterministic stand-in for a vision-language classifier.

    A clip is suitable when its mean absolute frame difference (in [0, 1])
    exceeds the threshold registered for the prompt.
    """

    def __init__(self, threshold: float = 0.01, prompt_thresholds: Mapping[str, float] | None = None):
        self.threshold = threshold
        self.prompt_thresholds = dict(prompt_thresholds or {})

    @staticmethod
    def motion_energy(segment: VideoSegment) -> float:
        f = segment.frames
        if len(f) < 2:
            raise ValueError(f"clip {segment.clip_id} has fewer than 2 frames")
        return float(np.abs(np.diff(f.astype(np.int16), axis=0)).mean() / 255.0)

    def classify(self, segment: VideoSegment, prompt: str) -> bool:
        return self.motion_energy(segment) > self.prompt_thresholds.get(prompt, self.threshold)


@dataclass
class Decision:
    clip: str
    stage: int
    prompt_id: str
    decision: bool | None
    gold: bool | None = None
    fault: str | None = None

    @property
    def kept(self) -> bool:
        return bool(self.decision) and self.fault is None


@dataclass
class FilterResult:
    stage1: list[VideoSegment]
    survivors: list[VideoSegment]
    decisions: list[Decision]

    def stage_decisions(self, stage: int) -> list[Decision]:
        return [d for d in self.decisions if d.stage == stage]


def _run_stage(segments, clf, prompt, stage, prompt_id, decisions):
    kept = []
    for seg in segments:
        try:
            verdict = bool(clf.classify(seg, prompt))
        except Exception as exc:  # classifier faults drop the clip, the run continues
            log.warning("classifier failed on %s: %s", seg.clip_id, exc)
            decisions.append(Decision(seg.clip_id, stage, prompt_id, None, seg.gold, fault=repr(exc)))
            continue
        decisions.append(Decision(seg.clip_id, stage, prompt_id, verdict, seg.gold))
        if verdict:
            kept.append(seg)
    return kept


def two_stage_filter(
    segments: Sequence[VideoSegment],
    clf: SegmentClassifier,
    prompt1: str = STAGE1_PROMPT,
    prompt2: str = STAGE2_PROMPT,
    prompt_ids: tuple[str, str] = ("stage1", "stage2"),
) -> FilterResult:
    decisions: list[Decision] = []
    first = _run_stage(segments, clf, prompt1, 1, prompt_ids[0], decisions)
    second = _run_stage(first, clf, prompt2, 2, prompt_ids[1], decisions)
    return FilterResult(stage1=first, survivors=second, decisions=decisions)


@dataclass
class FilterMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: list[str] = field(default_factory=list)


def filter_metrics(decisions: Sequence[Decision], gold: Mapping[str, bool] | None = None) -> FilterMetrics:
    """Precision/recall/F1 of the keep decisions against gold labels.

    A faulted decision counts as "dropped". Zero denominators give 0 and add
    a flag naming the undefined quantity.
    """
    tp = fp = fn = tn = 0
    scored = 0
    for d in decisions:
        label = gold.get(d.clip) if gold is not None else d.gold
        if label is None:
            raise ValueError(f"no gold label for clip {d.clip}")
        scored += 1
        if d.kept and label:
            tp += 1
        elif d.kept:
            fp += 1
        elif label:
            fn += 1
        else:
            tn += 1
    if scored == 0:
        raise ValueError("no labelled decisions to score")
    flags = []
    if tp + fp == 0:
        flags.append("precision_undefined")
    if tp + fn == 0:
        flags.append("recall_undefined")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        flags.append("f1_undefined")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return FilterMetrics(precision, recall, f1, tp, fp, fn, tn, flags)


def rank_prompts(
    segments: Sequence[VideoSegment],
    clf: SegmentClassifier,
    prompts: Mapping[str, str],
    precision_weight: float = 0.8,
) -> list[tuple[str, float, FilterMetrics]]:
    """Score each prompt by ``0.8 * precision + 0.2 * recall``; best first."""
    rows = []
    for pid, prompt in prompts.items():
        decisions: list[Decision] = []
        _run_stage(segments, clf, prompt, 2, pid, decisions)
        m = filter_metrics(decisions)
        rows.append((pid, precision_weight * m.precision + (1 - precision_weight) * m.recall, m))
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def write_decision_log(decisions: Sequence[Decision], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip", "stage", "prompt_id", "decision", "gold"])
        for d in decisions:
            verdict = "fault" if d.fault else str(bool(d.decision))
            w.writerow([d.clip, d.stage, d.prompt_id, verdict, "" if d.gold is None else str(d.gold)])
    return path


# --------------------------------------------------------------------- IDM


@dataclass
class FramePairs:
    frames: np.ndarray
    a_idx: np.ndarray
    b_idx: np.ndarray
    target: np.ndarray  # (N, 4)

    def __len__(self) -> int:
        return len(self.a_idx)


class PairBatch(NamedTuple):
    obs: torch.Tensor
    goal: torch.Tensor
    target: torch.Tensor


def frame_pairs(episodes: Sequence[Episode], identity_every: int = 4) -> FramePairs:
    """Consecutive-frame pairs labelled with the encoded relative pose.

    Every ``identity_every``-th frame is also paired with itself and labelled
    ``(0, 0, 1, 0)`` so the IDM learns what "no motion" looks like.
    """
    frames, a, b, tgt = [], [], [], []
    off = 0
    for e in episodes:
        n = len(e)
        frames.append(e.frames)
        for t in range(n - 1):
            a.append(off + t)
            b.append(off + t + 1)
            tgt.append(relative_poses_array(e.poses[t], e.poses[t + 1][None])[0])
        if identity_every:
            for t in range(0, n, identity_every):
                a.append(off + t)
                b.append(off + t)
                tgt.append(np.array([0.0, 0.0, 1.0, 0.0]))
        off += n
    if not a:
        raise ValueError("no frame pairs in the given episodes")
    return FramePairs(np.concatenate(frames), np.asarray(a), np.asarray(b), np.stack(tgt))


def _pair_batch(pairs: FramePairs, idx: np.ndarray, dtype: torch.dtype) -> PairBatch:
    return PairBatch(
        images_to_tensor(pairs.frames[pairs.a_idx[idx]], dtype),
        images_to_tensor(pairs.frames[pairs.b_idx[idx]], dtype),
        torch.as_tensor(pairs.target[idx], dtype=dtype),
    )


def _idm_loss(model, batch: PairBatch):
    loss = pose_yaw_sq(model(batch.obs, batch.goal), batch.target).mean()
    return loss, {"L_action": float(loss.detach())}


def train_idm(
    data: Sequence[Episode] | FramePairs,
    model_cfg: ModelConfig | None = None,
    cfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    header: Mapping[str, Any] | None = None,
    identity_every: int = 4,
) -> TrainResult:
    """Supervise an IDM on consecutive frames with the position-yaw loss."""
    model_cfg = model_cfg or ModelConfig(variant="early_fusion")
    if model_cfg.variant != "early_fusion":
        raise ValueError("the IDM uses the early-fusion encoder")
    cfg = cfg or TrainConfig()
    pairs = data if isinstance(data, FramePairs) else frame_pairs(data, identity_every)
    model = build_model(model_cfg, seed=cfg.seed, kind="idm")
    return fit(model, pairs, cfg, out_dir=out_dir, header=header, loss_fn=_idm_loss, batch_fn=_pair_batch)


@torch.no_grad()
def predict_pairs(idm: InverseDynamicsModel, a: np.ndarray, b: np.ndarray, batch_size: int = 64) -> np.ndarray:
    idm.eval()
    dtype = next(idm.parameters()).dtype
    out = []
    for s in range(0, len(a), batch_size):
        out.append(idm(images_to_tensor(a[s : s + batch_size], dtype), images_to_tensor(b[s : s + batch_size], dtype)))
    return torch.cat(out).double().numpy() if out else np.zeros((0, 4))


def pair_indices(n_frames: int, pairs_per_clip: int = 48) -> np.ndarray:
    """Start indices of uniformly spaced consecutive-frame pairs."""
    n_pairs = n_frames - 1
    if n_pairs <= 0:
        return np.zeros(0, dtype=np.int64)
    if n_pairs <= pairs_per_clip:
        return np.arange(n_pairs)
    return np.floor(np.linspace(0, n_pairs - 1, pairs_per_clip) + 0.5).astype(np.int64)


@dataclass
class AnnotationResult:
    records: list[dict[str, Any]]
    flagged: dict[str, int]


def annotate(segments: Sequence[VideoSegment], idm: InverseDynamicsModel, pairs_per_clip: int = 48) -> AnnotationResult:
    """Label ``pairs_per_clip`` uniformly spaced frame pairs per clip.

    Clips with fewer available pairs are labelled completely and listed in
    ``flagged`` with the number of records produced.
    """
    records, flagged = [], {}
    for seg in segments:
        ts = pair_indices(len(seg), pairs_per_clip)
        if len(ts) < pairs_per_clip:
            flagged[seg.clip_id] = int(len(ts))
        if len(ts) == 0:
            continue
        pred = predict_pairs(idm, seg.frames[ts], seg.frames[ts + 1])
        for t, a in zip(ts, pred):
            records.append({"clip": seg.clip_id, "t": int(t), "action": [float(v) for v in a]})
    return AnnotationResult(records, flagged)


def write_annotations(records: Sequence[Mapping[str, Any]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps({"clip": r["clip"], "t": r["t"], "action": r["action"]}) + "\n")
    return path


def idm_accuracy(idm: InverseDynamicsModel, episodes: Sequence[Episode], turn_eps: float = 1e-6) -> dict[str, float]:
    """Held-out IDM quality on consecutive pairs with known poses.

    Returns the median planar error, the mean true step length, and the
    fraction of turning pairs whose predicted turn direction is right.
    """
    pairs = frame_pairs(episodes, identity_every=0)
    pred = predict_pairs(idm, pairs.frames[pairs.a_idx], pairs.frames[pairs.b_idx])
    err = np.hypot(*(pred[:, :2] - pairs.target[:, :2]).T)
    step = np.hypot(*pairs.target[:, :2].T)
    true_turn = np.arctan2(pairs.target[:, 3], pairs.target[:, 2])
    pred_turn = np.arctan2(pred[:, 3], pred[:, 2])
    turning = np.abs(true_turn) > turn_eps
    sign_ok = np.sign(pred_turn[turning]) == np.sign(true_turn[turning])
    return {
        "median_planar_error": float(np.median(err)),
        "mean_step": float(step.mean()),
        "turn_sign_accuracy": float(sign_ok.mean()) if turning.any() else math.nan,
        "n_pairs": int(len(err)),
        "n_turning": int(turning.sum()),
    }


# ------------------------------------------------------------ frame dirs


def save_video_dir(frames: np.ndarray, root: str | Path, fps: float = 30.0, gold: bool | None = None) -> Path:
    """Store a frame sequence as ``root/frames/%06d.png`` plus ``video.json``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(f, mode="RGB").save(root / "frames" / f"{i:06d}.png")
    (root / "video.json").write_text(json.dumps({"fps": fps, "gold": gold, "n_frames": len(frames)}))
    return root


def load_video_dir(root: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    root = Path(root)
    meta_file = root / "video.json"
    meta = json.loads(meta_file.read_text()) if meta_file.is_file() else {"fps": 30.0}
    files = sorted((root / "frames").glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no frames under {root / 'frames'}")
    frames = []
    for fp in files:
        with Image.open(fp) as im:
            frames.append(np.asarray(im.convert("RGB")))
    return np.stack(frames), meta
