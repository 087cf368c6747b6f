"""Episode storage, cleaning, normalisation and training-sample extraction."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import global_indices, relative_poses_array

N_WAYPOINT = 10
N_GLOBAL = 10
MANIFEST_NAME = "manifest.json"


class EpisodeLoadError(IOError):
    """A stored episode is missing or corrupt."""


@dataclass
class Episode:
    """Aligned egocentric frames and world poses.

    ``frames`` is ``(T, H, W, 3)`` uint8 and ``poses`` is ``(T, 3)`` float64
    holding ``x, y, yaw`` rows.
    """

    frames: np.ndarray
    poses: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be (T, H, W, 3) uint8, got {self.frames.shape} {self.frames.dtype}")
        if self.poses.ndim != 2 or self.poses.shape[1] != 3:
            raise ValueError(f"poses must be (T, 3), got {self.poses.shape}")
        if len(self.frames) != len(self.poses):
            raise ValueError(f"{len(self.frames)} frames but {len(self.poses)} poses")

    def __len__(self) -> int:
        return len(self.poses)

    def step_displacements(self) -> np.ndarray:
        d = np.diff(self.poses[:, :2], axis=0)
        return np.hypot(d[:, 0], d[:, 1])

    def slice(self, start: int, stop: int) -> "Episode":
        return Episode(self.frames[start:stop].copy(), self.poses[start:stop].copy(), dict(self.meta))


@dataclass
class TrainingSample:
    """One (observation, goal) pair with its four label groups.

    All actions are encoded ``[dx, dy, cos, sin]`` rows.
    """

    obs: np.ndarray
    goal: np.ndarray
    waypoints: np.ndarray  # (N_way, 4)
    rel_goal: np.ndarray  # (4,)
    nav_dist: float
    global_path: np.ndarray  # (N_global, 4)
    horizon: int


@dataclass
class DatasetManifest:
    entries: list[dict[str, Any]]
    scale: float = 1.0
    config: dict[str, Any] = field(default_factory=dict)

    def split(self, tag: str) -> list[dict[str, Any]]:
        return [e for e in self.entries if e.get("split") == tag]

    def to_json(self) -> dict[str, Any]:
        return {"scale": self.scale, "config": self.config, "episodes": self.entries}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "DatasetManifest":
        return cls(entries=list(obj["episodes"]), scale=float(obj.get("scale", 1.0)), config=obj.get("config", {}))


# ---------------------------------------------------------------- storage


def save_episode(e: Episode, root: str | os.PathLike, episode_id: int | str) -> dict[str, Any]:
    """Write ``e`` under ``root/episode_<id>`` and return its manifest entry."""
    name = f"episode_{episode_id:06d}" if isinstance(episode_id, int) else f"episode_{episode_id}"
    d = Path(root) / name
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(e.frames):
        Image.fromarray(frame, mode="RGB").save(d / "frames" / f"{i:06d}.png")
    rows = [[i, float(x), float(y), float(yaw)] for i, (x, y, yaw) in enumerate(e.poses)]
    (d / "poses.json").write_text(json.dumps(rows))
    (d / "meta.json").write_text(json.dumps(e.meta, sort_keys=True))
    return {"path": name, "length": len(e), "split": None}


def load_episode(path: str | os.PathLike) -> Episode:
    d = Path(path)
    poses_file = d / "poses.json"
    if not poses_file.is_file():
        raise EpisodeLoadError(f"missing pose table {poses_file}")
    try:
        rows = json.loads(poses_file.read_text())
        poses = np.array([r[1:4] for r in rows], dtype=np.float64).reshape(-1, 3)
    except (ValueError, TypeError, IndexError) as exc:
        raise EpisodeLoadError(f"corrupt pose table {poses_file}: {exc}") from exc
    frames = []
    for i in range(len(poses)):
        fp = d / "frames" / f"{i:06d}.png"
        try:
            with Image.open(fp) as im:
                frames.append(np.asarray(im.convert("RGB")))
        except (OSError, ValueError) as exc:
            raise EpisodeLoadError(f"cannot read frame {fp}: {exc}") from exc
    meta_file = d / "meta.json"
    meta = json.loads(meta_file.read_text()) if meta_file.is_file() else {}
    if not frames:
        raise EpisodeLoadError(f"episode {d} has no frames")
    return Episode(np.stack(frames), poses, meta)


def save_manifest(manifest: DatasetManifest, root: str | os.PathLike) -> Path:
    p = Path(root) / MANIFEST_NAME
    p.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    return p


def load_manifest(root: str | os.PathLike) -> DatasetManifest:
    p = Path(root) / MANIFEST_NAME
    if not p.is_file():
        raise EpisodeLoadError(f"no {MANIFEST_NAME} in {root}")
    return DatasetManifest.from_json(json.loads(p.read_text()))


def load_dataset(root: str | os.PathLike, split: str | None = None) -> tuple[DatasetManifest, list[Episode]]:
    """Load the manifest and (optionally only one split of) its episodes."""
    manifest = load_manifest(root)
    entries = manifest.entries if split is None else manifest.split(split)
    episodes = []
    for entry in entries:
        d = Path(root) / entry["path"]
        if not d.is_dir():
            raise EpisodeLoadError(f"manifest entry points to missing episode directory {d}")
        episodes.append(load_episode(d))
    return manifest, episodes


# --------------------------------------------------------------- cleaning


def filter_outliers(e: Episode, factor: float = 5.0, mean_displacement: float | None = None) -> list[Episode]:
    """Split ``e`` at transitions whose displacement exceeds ``factor`` x mean.

    The mean is taken over all transitions of ``e`` before any cut unless
    ``mean_displacement`` supplies an external reference (e.g. a dataset-wide
    mean). Fragments shorter than two frames are dropped.
    """
    if len(e) < 2:
        raise ValueError("episode must have at least 2 frames")
    steps = e.step_displacements()
    m = float(np.mean(steps)) if mean_displacement is None else float(mean_displacement)
    if m <= 0.0:
        return [e]
    cuts = np.flatnonzero(steps > factor * m)
    if cuts.size == 0:
        return [e]
    bounds = [0, *(int(c) + 1 for c in cuts), len(e)]
    return [e.slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b - a >= 2]


def normalize_dataset(episodes: Sequence[Episode]) -> tuple[list[Episode], float]:
    """Scale positions so the pooled mean step displacement becomes 1."""
    steps = [e.step_displacements() for e in episodes]
    n = sum(s.size for s in steps)
    if n == 0:
        raise ValueError("normalize_dataset needs at least one transition")
    mean = float(np.sum([s.sum() for s in steps])) / n
    if mean <= 0.0:
        raise ValueError("global mean step displacement is zero")
    scale = 1.0 / mean
    out = []
    for e in episodes:
        poses = e.poses.copy()
        poses[:, :2] *= scale
        meta = dict(e.meta)
        meta["scale"] = meta.get("scale", 1.0) * scale
        out.append(Episode(e.frames, poses, meta))
    return out, scale


# ----------------------------------------------------------------- labels


def _label_arrays(poses: np.ndarray, t: int, T_sub: int, n_way: int, n_global: int, nav_exponent: float = 1.0):
    ref = poses[t]
    way_idx = t + np.minimum(np.arange(1, n_way + 1), T_sub)
    waypoints = relative_poses_array(ref, poses[way_idx])
    rel_goal = relative_poses_array(ref, poses[t + T_sub][None])[0]
    if T_sub == 0:
        glob_idx = np.zeros(n_global, dtype=int)
    else:
        glob_idx = np.asarray(global_indices(T_sub, n_global))
    global_path = relative_poses_array(ref, poses[t + glob_idx])
    seg = poses[t : t + T_sub + 1, :2]
    nav_dist = float(np.sum(np.hypot(*np.diff(seg, axis=0).T) ** nav_exponent)) if T_sub > 0 else 0.0
    return waypoints, rel_goal, nav_dist, global_path


def make_sample(
    e: Episode, t: int, T_sub: int, n_way: int = N_WAYPOINT, n_global: int = N_GLOBAL, nav_exponent: float = 1.0
) -> TrainingSample:
    """Build the training sample observing ``frames[t]`` with goal ``frames[t+T_sub]``.

    Waypoint ``k`` targets pose ``t + min(k, T_sub)`` so labels past the goal
    repeat the goal; global waypoint ``k`` targets ``t + floor(k*T_sub/n_global)``.
    ``nav_exponent`` raises each step norm before summing; 1 gives path length.
    """
    if t < 0 or T_sub < 0 or t + T_sub >= len(e):
        raise IndexError(f"invalid sample window t={t}, T_sub={T_sub} for episode of length {len(e)}")
    waypoints, rel_goal, nav_dist, global_path = _label_arrays(e.poses, t, T_sub, n_way, n_global, nav_exponent)
    return TrainingSample(
        obs=e.frames[t],
        goal=e.frames[t + T_sub],
        waypoints=waypoints,
        rel_goal=rel_goal,
        nav_dist=nav_dist,
        global_path=global_path,
        horizon=int(T_sub),
    )


def draw_window(length: int, rng: np.random.Generator, T_min: int = 5, T_max: int = 64) -> tuple[int, int]:
    """Draw ``(t, T_sub)`` with ``T_sub ~ U[T_min, min(T_max, length-1)]``."""
    hi = min(T_max, length - 1)
    if length < T_min + 1 or hi < T_min:
        raise ValueError(f"episode of length {length} too short for T_min={T_min}")
    T_sub = int(rng.integers(T_min, hi + 1))
    t = int(rng.integers(0, length - T_sub))
    return t, T_sub


def sample_training_pair(
    e: Episode, rng: np.random.Generator, T_min: int = 5, T_max: int = 64
) -> TrainingSample:
    t, T_sub = draw_window(len(e), rng, T_min, T_max)
    return make_sample(e, t, T_sub)


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.9, seed: int = 0) -> DatasetManifest:
    """Tag whole episodes ``train``/``val``; deterministic in ``seed``."""
    n = len(manifest.entries)
    if n < 2:
        raise ValueError("split_dataset needs at least 2 episodes")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    entries = [dict(e, split="train" if i in train else "val") for i, e in enumerate(manifest.entries)]
    return DatasetManifest(entries=entries, scale=manifest.scale, config=dict(manifest.config))


# ------------------------------------------------------------ sample sets


@dataclass
class SampleSet:
    """Batched training samples backed by a shared frame bank.

    Images are stored once in ``frames``; each sample refers to them by
    index, which keeps epoch-wise redraws cheap.
    """

    frames: np.ndarray  # (F, H, W, 3) uint8
    obs_idx: np.ndarray  # (N,)
    goal_idx: np.ndarray  # (N,)
    waypoints: np.ndarray  # (N, n_way, 4)
    rel_goal: np.ndarray  # (N, 4)
    nav_dist: np.ndarray  # (N,)
    global_path: np.ndarray  # (N, n_global, 4)

    def __len__(self) -> int:
        return len(self.obs_idx)

    def subset(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(
            self.frames,
            self.obs_idx[idx],
            self.goal_idx[idx],
            self.waypoints[idx],
            self.rel_goal[idx],
            self.nav_dist[idx],
            self.global_path[idx],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "SampleSet":
        if not samples:
            raise ValueError("empty sample list")
        frames = np.stack([s.obs for s in samples] + [s.goal for s in samples])
        n = len(samples)
        return cls(
            frames=frames,
            obs_idx=np.arange(n),
            goal_idx=np.arange(n, 2 * n),
            waypoints=np.stack([s.waypoints for s in samples]),
            rel_goal=np.stack([s.rel_goal for s in samples]),
            nav_dist=np.array([s.nav_dist for s in samples], dtype=np.float64),
            global_path=np.stack([s.global_path for s in samples]),
        )


class FrameBank:
    """All frames of a list of episodes concatenated into one array."""

    def __init__(self, episodes: Sequence[Episode]):
        if not episodes:
            raise ValueError("FrameBank needs at least one episode")
        self.episodes = list(episodes)
        self.offsets = np.cumsum([0] + [len(e) for e in self.episodes])
        self.frames = np.concatenate([e.frames for e in self.episodes])

    def draw(
        self,
        rng: np.random.Generator,
        pairs_per_episode: int = 8,
        T_min: int = 5,
        T_max: int = 64,
        n_way: int = N_WAYPOINT,
        n_global: int = N_GLOBAL,
        nav_exponent: float = 1.0,
    ) -> SampleSet:
        """Draw ``pairs_per_episode`` windows from every eligible episode."""
        obs_idx, goal_idx, way, rel, dist, glob = [], [], [], [], [], []
        for ei, e in enumerate(self.episodes):
            if len(e) < T_min + 1:
                continue
            for _ in range(pairs_per_episode):
                t, T_sub = draw_window(len(e), rng, T_min, T_max)
                w, r, d, g = _label_arrays(e.poses, t, T_sub, n_way, n_global, nav_exponent)
                obs_idx.append(self.offsets[ei] + t)
                goal_idx.append(self.offsets[ei] + t + T_sub)
                way.append(w)
                rel.append(r)
                dist.append(d)
                glob.append(g)
        if not obs_idx:
            raise ValueError(f"no episode is long enough for T_min={T_min}")
        return SampleSet(
            frames=self.frames,
            obs_idx=np.asarray(obs_idx),
            goal_idx=np.asarray(goal_idx),
            waypoints=np.stack(way),
            rel_goal=np.stack(rel),
            nav_dist=np.asarray(dist, dtype=np.float64),
            global_path=np.stack(glob),
        )


def pooled_mean_step(episodes: Iterable[Episode]) -> float:
    steps = np.concatenate([e.step_displacements() for e in episodes])
    if steps.size == 0:
        return math.nan
    return float(steps.mean())
