"""``goalnav`` command-line entry point.

Every subcommand writes into a run directory that also holds ``config.json``,
the fully resolved configuration. Passing that file back with ``--config``
repeats the run. Outputs are staged in a hidden sibling directory and only
moved into place on success, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable

from . import config as C
from .data import (
    DatasetManifest,
    EpisodeLoadError,
    filter_outliers,
    load_dataset,
    normalize_dataset,
    save_episode,
    save_manifest,
    split_dataset,
)
from .model import CheckpointMismatchError, build_model, load_checkpoint
from .sim import LEVELS, World, gen_expert_dataset, generate_world, load_tasks, sample_tasks, save_tasks
from .sim.tasks import TaskSamplingError
from .sim.world import WorldGenerationError
from .training import LossWeights, finetune, train, validate

log = logging.getLogger("goalnav")


class UserError(Exception):
    """Bad input from the user; reported on one line with exit status 1."""


# ------------------------------------------------------------------ helpers


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise UserError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _load_world(cfg) -> World:
    p = _need_file(cfg["io"]["world"], "--world")
    try:
        return World.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read world {p}: {exc}") from exc


def _load_data(cfg, split: str | None):
    root = _need_file(cfg["io"]["data"], "--data")
    manifest, episodes = load_dataset(root, split)
    if not episodes:
        raise UserError(f"dataset {root} has no {split or 'any'} episodes")
    return manifest, episodes


def _load_model(path_key: str, cfg, flag: str):
    p = _need_file(cfg["io"][path_key], flag)
    return p, *load_checkpoint(p)


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _tasks(cfg, world: World):
    if cfg["io"]["tasks"]:
        return load_tasks(_need_file(cfg["io"]["tasks"], "--task-file"))
    total = int(cfg["eval"]["tasks"])
    if total < 1:
        raise UserError("eval.tasks must be at least 1")
    per_level = math.ceil(total / len(LEVELS))
    pool = sample_tasks(world, per_level, tuple(cfg["eval"]["thresholds"]), seed=cfg["eval"]["seed"])
    # Spread ``total`` over the levels as evenly as possible, earlier levels first.
    counts = [total // len(LEVELS) + (i < total % len(LEVELS)) for i in range(len(LEVELS))]
    return [t for level, n in zip(LEVELS, counts) for t in [t for t in pool if t.difficulty == level][:n]]


def _scale(header) -> float:
    return float(header.get("scale", 1.0))


# ---------------------------------------------------------------- commands


def cmd_gen_world(cfg, out: Path) -> None:
    w = cfg["world"]
    world = generate_world(w["seed"], w["size"], w["density"], w["cell_size"])
    world.save(out / "world.json")
    log.info("world seed %d size %d: %d free cells", world.seed, world.size, len(world.free_cells()))


def cmd_gen_data(cfg, out: Path) -> None:
    world = _load_world(cfg)
    d = cfg["data"]
    if d["episodes"] < 2:
        raise UserError("data.episodes must be at least 2")
    raw = gen_expert_dataset(world, d["episodes"], d["seed"], d["image_size"], d["image_size"],
                             math.radians(d["fov_deg"]))
    pieces = [p for e in raw for p in filter_outliers(e, d["outlier_factor"])]
    episodes, scale = normalize_dataset(pieces)
    entries = [save_episode(e, out, i) for i, e in enumerate(episodes)]
    manifest = split_dataset(DatasetManifest(entries, scale, {"data": d, "world": world.to_json()}),
                             d["train_fraction"], d["seed"])
    save_manifest(manifest, out)
    world.save(out / "world.json")
    log.info("%d raw episodes -> %d after filtering; scale %.6f", len(raw), len(episodes), scale)


def _check_image_size(cfg, manifest) -> None:
    size = manifest.config.get("data", {}).get("image_size")
    if size is not None and size != cfg["model"]["image_size"]:
        raise UserError(f"dataset images are {size}px but model.image_size is {cfg['model']['image_size']}")


def _val_fn(val, weights, tc):
    """Validation-loss callback for ``train.val_every``; ``None`` without a val split."""
    if not val:
        return None
    return lambda m: validate(m, val, weights, T_min=tc.T_min, T_max=tc.T_max)["total"]


def cmd_pretrain(cfg, out: Path) -> None:
    manifest, episodes = _load_data(cfg, "train")
    _check_image_size(cfg, manifest)
    weights = LossWeights.preset(cfg["loss"]["preset"])
    tc = C.train_config(cfg)
    model = build_model(C.model_config(cfg), seed=tc.seed)
    _, val = load_dataset(cfg["io"]["data"], "val")
    res = train(model, episodes, tc, weights, out, header={"scale": manifest.scale}, val_fn=_val_fn(val, weights, tc))
    if val:
        _write_json(out / "val.json", validate(res.model, val, weights, T_min=tc.T_min, T_max=tc.T_max))
    log.info("trained %d steps; final loss %.5f", res.steps, res.curve[-1]["total"])


def cmd_finetune(cfg, out: Path) -> None:
    ckpt = _need_file(cfg["io"]["from"], "--from")
    manifest, episodes = _load_data(cfg, "train")
    weights = LossWeights.preset(cfg["loss"]["preset"])
    tc = C.train_config(cfg)
    _, val = load_dataset(cfg["io"]["data"], "val")
    res = finetune(ckpt, episodes, cfg["finetune"]["fraction"], tc, weights, out,
                   header={"scale": manifest.scale}, val_fn=_val_fn(val, weights, tc))
    if val:
        _write_json(out / "val.json", validate(res.model, val, weights, T_min=tc.T_min, T_max=tc.T_max))


def cmd_train_idm(cfg, out: Path) -> None:
    from .idm import idm_accuracy, train_idm

    manifest, episodes = _load_data(cfg, "train")
    _check_image_size(cfg, manifest)
    res = train_idm(episodes, C.model_config(cfg), C.train_config(cfg), out,
                    header={"scale": manifest.scale}, identity_every=cfg["idm"]["identity_every"])
    _, val = load_dataset(cfg["io"]["data"], "val")
    if val:
        _write_json(out / "idm_accuracy.json", idm_accuracy(res.model, val))


def _video_dirs(root: Path) -> list[Path]:
    if (root / "frames").is_dir():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "frames").is_dir())
    if not dirs:
        raise UserError(f"no video directories (with a frames/ folder) under {root}")
    return dirs


def cmd_label(cfg, out: Path) -> None:
    from .idm import (
        MotionEnergyClassifier,
        annotate,
        filter_metrics,
        load_video_dir,
        segment_video,
        two_stage_filter,
        write_annotations,
        write_decision_log,
    )

    ic = cfg["idm"]
    if ic["classifier"] != "mock":
        raise UserError(f"unknown classifier {ic['classifier']!r}; only 'mock' is available")
    clips = _need_file(cfg["io"]["clips"], "--clips")
    _, idm, _ = _load_model("idm", cfg, "--idm")
    segments = []
    for d in _video_dirs(clips):
        frames, meta = load_video_dir(d)
        segments += segment_video(frames, meta.get("fps", ic["fps_in"]), ic["clip_seconds"], ic["fps_out"],
                                  source_id=d.name, gold=meta.get("gold"))
    result = two_stage_filter(segments, MotionEnergyClassifier(ic["threshold"]))
    write_decision_log(result.decisions, out / "decisions.csv")
    if all(seg.gold is not None for seg in segments):
        metrics = {}
        for s in (1, 2):
            decisions = result.stage_decisions(s)
            metrics[f"stage{s}"] = asdict(filter_metrics(decisions)) if decisions else None
        _write_json(out / "filter_metrics.json", metrics)
    ann = annotate(result.survivors, idm, ic["pairs_per_clip"])
    write_annotations(ann.records, out / "annotations.jsonl")
    _write_json(out / "filtered.json", {"survivors": [s.clip_id for s in result.survivors],
                                        "flagged": ann.flagged})
    log.info("%d clips, %d survive, %d annotation records", len(segments), len(result.survivors), len(ann.records))


def cmd_eval(cfg, out: Path) -> None:
    from .evaluation import evaluate

    _, model, header = _load_model("model", cfg, "--model")
    world = _load_world(cfg)
    tasks = _tasks(cfg, world)
    save_tasks(tasks, out / "tasks.json")
    e = cfg["eval"]
    report = evaluate(model, world, tasks, e["budget"], e["goal_radius"], action_scale=1.0 / _scale(header),
                      config={"model": str(cfg["io"]["model"]), "thresholds": list(e["thresholds"]),
                              "seed": e["seed"]})
    report.save(out / "report.json")
    report.save_csv(out / "report.csv")
    log.info("SR %.3f SPL %.3f over %d tasks", report.overall["SR"], report.overall["SPL"], report.n_tasks)


def cmd_ablate(cfg, out: Path) -> None:
    from .experiments import AblationGrid, run_ablations, write_table

    if cfg["io"]["grid"]:
        grid_obj = C.load_config_file(_need_file(cfg["io"]["grid"], "--grid"))
        try:
            cfg["ablate"].update(AblationGrid.from_dict(grid_obj).__dict__)
        except ValueError as exc:
            raise UserError(str(exc)) from exc
        cfg["ablate"] = {k: list(v) for k, v in cfg["ablate"].items()}
        C.save_snapshot(cfg, out)
    manifest, episodes = _load_data(cfg, "train")
    _, val = load_dataset(cfg["io"]["data"], "val")
    world = _load_world(cfg)
    tasks = _tasks(cfg, world)
    e = cfg["eval"]
    rows = run_ablations(episodes, world, tasks, AblationGrid.from_dict(cfg["ablate"]), C.model_config(cfg),
                         C.train_config(cfg), manifest.scale, e["budget"], e["goal_radius"], val or None)
    write_table(rows, out / "ablation")


def cmd_curve(cfg, out: Path) -> None:
    from .experiments import data_efficiency_curve, write_curve

    manifest, episodes = _load_data(cfg, "train")
    _, val = load_dataset(cfg["io"]["data"], "val")
    if not val:
        raise UserError("the curve needs a validation split")
    world = _load_world(cfg) if cfg["io"]["world"] else None
    tasks = _tasks(cfg, world) if world is not None else None
    e, tc, mc = cfg["eval"], C.train_config(cfg), C.model_config(cfg)
    kw = dict(fractions=cfg["curve"]["fractions"], scale=manifest.scale, budget=e["budget"],
              goal_radius=e["goal_radius"])
    records = []
    pre = cfg["curve"]["pretrained"]
    if pre:
        records += data_efficiency_curve(_need_file(pre, "curve.pretrained"), episodes, val, world, tasks, tc,
                                         mc, label="pretrained", **kw)
    records += data_efficiency_curve(None, episodes, val, world, tasks, tc, mc, label="scratch", **kw)
    write_curve(records, out)


COMMANDS: dict[str, tuple[Callable, str]] = {
    "gen-world": (cmd_gen_world, "generate a procedural grid world"),
    "gen-data": (cmd_gen_data, "render expert episodes, filter, normalise and split them"),
    "pretrain": (cmd_pretrain, "train a navigation model from scratch"),
    "finetune": (cmd_finetune, "fine-tune a checkpoint on a fraction of the episodes"),
    "train-idm": (cmd_train_idm, "train the inverse dynamics model"),
    "label": (cmd_label, "filter video clips and annotate them with the IDM"),
    "eval": (cmd_eval, "closed-loop SR/SPL evaluation"),
    "ablate": (cmd_ablate, "train and evaluate an ablation grid"),
    "curve": (cmd_curve, "data-efficiency curve over fine-tuning fractions"),
}

# flag -> (dotted key, type, commands)
FLAGS: dict[str, tuple[str, Callable, tuple[str, ...]]] = {
    "--seed": ("", int, ()),  # resolved per command below
    "--size": ("world.size", int, ("gen-world",)),
    "--density": ("world.density", float, ("gen-world",)),
    "--world": ("io.world", str, ("gen-data", "eval", "ablate", "curve")),
    "--episodes": ("data.episodes", int, ("gen-data",)),
    "--data": ("io.data", str, ("pretrain", "finetune", "train-idm", "ablate", "curve")),
    "--from": ("io.from", str, ("finetune",)),
    "--fraction": ("finetune.fraction", float, ("finetune",)),
    "--clips": ("io.clips", str, ("label",)),
    "--classifier": ("idm.classifier", str, ("label",)),
    "--idm": ("io.idm", str, ("label",)),
    "--model": ("io.model", str, ("eval",)),
    "--tasks": ("eval.tasks", int, ("eval", "ablate", "curve")),
    "--task-file": ("io.tasks", str, ("eval", "ablate", "curve")),
    "--budget": ("eval.budget", int, ("eval", "ablate", "curve")),
    "--grid": ("io.grid", str, ("ablate",)),
    "--pretrained": ("curve.pretrained", str, ("curve",)),
    "--fractions": ("curve.fractions", lambda s: [float(x) for x in s.split(",")], ("curve",)),
}
SEED_KEYS = {"gen-world": "world.seed", "gen-data": "data.seed", "eval": "eval.seed"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="goalnav", description="Image-goal navigation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", action="append", default=[], help="YAML/JSON config file (repeatable)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                       help="dotted-key override, e.g. train.learning_rate=1e-4 (repeatable)")
        p.add_argument("--out", help="run directory (default runs/<command>)")
        for flag, (key, typ, cmds) in FLAGS.items():
            if flag == "--seed":
                p.add_argument(flag, type=int, help=f"stage seed ({SEED_KEYS.get(name, 'seed')})")
            elif name in cmds:
                p.add_argument(flag, type=typ, help=key)
    return parser


def resolve_args(args: argparse.Namespace) -> dict[str, Any]:
    overrides = []
    for flag, (key, _, cmds) in FLAGS.items():
        dest = flag.lstrip("-").replace("-", "_")
        value = getattr(args, dest, None)
        if value is None:
            continue
        if flag == "--seed":
            key = SEED_KEYS.get(args.command, "seed")
        overrides.append(f"{key}={json.dumps(value)}")
    overrides.append(f"command={json.dumps(args.command)}")
    if args.out:
        overrides.append(f"out={json.dumps(args.out)}")
    cfg = C.resolve(args.config, overrides + list(args.overrides))
    if not cfg["out"]:
        cfg["out"] = str(Path("runs") / args.command)
    return cfg


def run(cfg: dict[str, Any]) -> Path:
    """Execute ``cfg["command"]`` into a staging directory, then move it to ``cfg["out"]``."""
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not (out / C.SNAPSHOT_NAME).exists():
        raise UserError(f"refusing to overwrite non-run directory {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    handler = logging.FileHandler(stage / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logging.getLogger().addHandler(handler)
    try:
        C.save_snapshot(cfg, stage)
        COMMANDS[cfg["command"]][0](cfg, stage)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)
    return out


USER_ERRORS = (
    UserError,
    C.ConfigError,
    FileNotFoundError,
    EpisodeLoadError,
    CheckpointMismatchError,
    TaskSamplingError,
    WorldGenerationError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        out = run(resolve_args(args))
    except USER_ERRORS as exc:
        print(f"goalnav: error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("goalnav: interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("internal error", exc_info=True)
        print(f"goalnav: internal error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
