"""Layered run configuration: defaults, then a config file, then ``--set`` overrides.

Every parameter is addressable by a dotted key such as ``train.learning_rate``.
Unknown keys are rejected at every layer so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml

from .model import ModelConfig
from .training import LossWeights, TrainConfig

SNAPSHOT_NAME = "config.json"


class ConfigError(ValueError):
    """A user-facing configuration problem (unknown key, bad value, unreadable file)."""


def default_config() -> dict[str, Any]:
    return {
        "command": None,
        "seed": 0,
        "out": None,
        "io": {
            "world": None,
            "data": None,
            "model": None,
            "from": None,
            "clips": None,
            "idm": None,
            "grid": None,
            "tasks": None,
        },
        "world": {"seed": None, "size": 16, "density": 0.2, "cell_size": 1.0},
        "data": {
            "episodes": 2000,
            "seed": None,
            "image_size": 64,
            "fov_deg": 90.0,
            "outlier_factor": 5.0,
            "train_fraction": 0.9,
        },
        "model": asdict(ModelConfig()),
        "train": {**asdict(TrainConfig()), "seed": None},
        "loss": {"preset": "all"},
        "finetune": {"fraction": 1.0},
        "eval": {
            "tasks": 150,
            "budget": 100,
            "goal_radius": 1.0,
            "thresholds": [8.0, 16.0],
            "seed": None,
        },
        "idm": {
            "classifier": "mock",
            "threshold": 0.01,
            "clip_seconds": 10.0,
            "fps_in": 30.0,
            "fps_out": 30.0,
            "pairs_per_clip": 48,
            "identity_every": 4,
        },
        "ablate": {"variant": ["early_fusion"], "encoder_init": ["raw"], "losses": ["all"]},
        "curve": {"fractions": [1.0, 0.5, 0.25, 0.125, 0.0625], "pretrained": None},
    }


def _merge(base: dict[str, Any], update: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {dotted} must be a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = _coerce(base[key], copy.deepcopy(value), dotted)


def _coerce(default: Any, value: Any, key: str) -> Any:
    """Match numeric types to the default so ``"5e-05"`` and ``3`` land as floats."""
    if isinstance(default, bool) or value is None:
        return value
    try:
        if isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
            return float(value)
        if isinstance(default, int) and isinstance(value, str):
            return int(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key} expects a {type(default).__name__}, got {value!r}") from exc
    return value


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON mapping (JSON is a subset of YAML)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        obj = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}".splitlines()[0]) from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return obj


def parse_override(item: str) -> tuple[list[str], Any]:
    """``"a.b=value"`` -> (["a", "b"], parsed value); values are parsed as JSON, else YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        try:
            value = yaml.safe_load(raw) if raw else ""
        except yaml.YAMLError:
            value = raw
    return key.strip().split("."), value


def set_dotted(cfg: dict[str, Any], keys: list[str], value: Any) -> None:
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key: {'.'.join(keys[: i + 1])}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {'.'.join(keys)}")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(f"config key {'.'.join(keys)} is a section, not a value")
    node[keys[-1]] = _coerce(node[keys[-1]], value, ".".join(keys))


def resolve(files: Iterable[str | Path] = (), overrides: Iterable[str] = ()) -> dict[str, Any]:
    """Defaults < config files (in order) < dotted overrides; then derive stage seeds."""
    cfg = default_config()
    for f in files:
        _merge(cfg, load_config_file(f))
    for item in overrides:
        set_dotted(cfg, *parse_override(item))
    check(cfg)
    return derive_seeds(cfg)


def stage_seed(root: int, stage: str) -> int:
    """A 31-bit seed for ``stage`` derived deterministically from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def derive_seeds(cfg: dict[str, Any]) -> dict[str, Any]:
    """Fill every unset per-stage seed from the single root seed."""
    for stage in ("world", "data", "train", "eval"):
        if cfg[stage]["seed"] is None:
            cfg[stage]["seed"] = stage_seed(cfg["seed"], stage)
    return cfg


def check(cfg: Mapping[str, Any]) -> None:
    """Validate typed sections early so errors surface before any work."""
    try:
        ModelConfig.from_dict(cfg["model"]).validate()
        TrainConfig.from_dict({**cfg["train"], "seed": cfg["train"]["seed"] or 0})
        LossWeights.preset(cfg["loss"]["preset"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def save_snapshot(cfg: Mapping[str, Any], out_dir: str | Path) -> Path:
    path = Path(out_dir) / SNAPSHOT_NAME
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path
