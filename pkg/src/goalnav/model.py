"""Transformer policy over observation/goal image patches.

``early_fusion`` feeds the patch tokens of both images, each tagged with a
learnable type vector, through one encoder with a single CLS token.
``non_fusion`` encodes each image on its own and concatenates the two CLS
outputs before the heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

VARIANTS = ("early_fusion", "non_fusion")
ENCODER_PREFIX = "encoder."
# Encoder tensors that pretrained image backbones provide; type/CLS tokens
# belong to the navigation model and are never overwritten.
_NON_TRANSFERABLE = ("encoder.cls_token", "encoder.type_obs", "encoder.type_goal")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    head_hidden: int = 256
    variant: str = "early_fusion"
    n_waypoint: int = 10
    n_global: int = 10

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        for name in ("image_size", "patch_size", "embed_dim", "depth", "heads", "mlp_ratio",
                     "head_hidden", "n_waypoint", "n_global"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


class ModelOutputs(NamedTuple):
    waypoints: torch.Tensor  # (B, n_waypoint, 4)
    rel_goal: torch.Tensor  # (B, 4)
    nav_dist: torch.Tensor  # (B,)
    global_path: torch.Tensor  # (B, n_global, 4)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm encoder block: self-attention and MLP, each residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches, d))
        self.type_obs = nn.Parameter(torch.zeros(1, 1, d))
        self.type_goal = nn.Parameter(torch.zeros(1, 1, d))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        for p in (self.pos_embed, self.type_obs, self.type_goal, self.cls_token):
            nn.init.trunc_normal_(p, std=0.02)

    def tokens(self, images: torch.Tensor, type_vec: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed((images - 0.5) * 2.0)  # (B, D, h, w)
        x = x.flatten(2).transpose(1, 2)
        return x + self.pos_embed + type_vec

    def run(self, seq: torch.Tensor, keep_hidden: bool = False):
        cls = self.cls_token.expand(seq.shape[0], -1, -1)
        x = torch.cat([cls, seq], dim=1)
        hidden = []
        for blk in self.blocks:
            x = blk(x)
            if keep_hidden:
                hidden.append(x)
        return self.norm(x), hidden


def _head(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


class _TwoImageModel(nn.Module):
    """Shared encoder plumbing for the navigation policy and the IDM."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.encoder = PatchEncoder(cfg)

    @property
    def head_input_dim(self) -> int:
        return self.cfg.embed_dim * (2 if self.cfg.variant == "non_fusion" else 1)

    @property
    def sequence_length(self) -> int:
        n = self.cfg.n_patches
        return 1 + 2 * n if self.cfg.variant == "early_fusion" else 1 + n

    def _check(self, obs: torch.Tensor, goal: torch.Tensor) -> None:
        s = self.cfg.image_size
        for name, t in (("obs", obs), ("goal", goal)):
            if t.ndim != 4 or tuple(t.shape[1:]) != (3, s, s):
                raise ValueError(f"{name} must be (B, 3, {s}, {s}), got {tuple(t.shape)}")
        if obs.shape[0] != goal.shape[0]:
            raise ValueError(f"batch mismatch: obs {obs.shape[0]} vs goal {goal.shape[0]}")

    def embed(self, obs: torch.Tensor, goal: torch.Tensor, keep_hidden: bool = False):
        """Joint embedding fed to the heads, plus per-block hidden states.

        For ``non_fusion`` the hidden states are ``(obs_branch, goal_branch)`` lists.
        """
        self._check(obs, goal)
        enc = self.encoder
        obs_tok = enc.tokens(obs, enc.type_obs)
        goal_tok = enc.tokens(goal, enc.type_goal)
        if self.cfg.variant == "early_fusion":
            out, hidden = enc.run(torch.cat([obs_tok, goal_tok], dim=1), keep_hidden)
            return out[:, 0], hidden
        out_o, hid_o = enc.run(obs_tok, keep_hidden)
        out_g, hid_g = enc.run(goal_tok, keep_hidden)
        return torch.cat([out_o[:, 0], out_g[:, 0]], dim=-1), (hid_o, hid_g)


class NavigationModel(_TwoImageModel):
    """Image-goal policy with waypoint, relative-pose, distance and global-path heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        d, h = self.head_input_dim, cfg.head_hidden
        self.waypoint_head = _head(d, h, cfg.n_waypoint * 4)
        self.relative_head = _head(d, h, 4)
        self.distance_head = _head(d, h, 1)
        self.global_head = _head(d, h, cfg.n_global * 4)

    def forward(self, obs: torch.Tensor, goal: torch.Tensor) -> ModelOutputs:
        z, _ = self.embed(obs, goal)
        b = z.shape[0]
        return ModelOutputs(
            waypoints=self.waypoint_head(z).view(b, self.cfg.n_waypoint, 4),
            rel_goal=self.relative_head(z),
            nav_dist=self.distance_head(z).squeeze(-1),
            global_path=self.global_head(z).view(b, self.cfg.n_global, 4),
        )


class InverseDynamicsModel(_TwoImageModel):
    """Early-fusion encoder with one 4-dim action head for consecutive frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.action_head = _head(self.head_input_dim, cfg.head_hidden, 4)

    def forward(self, frame_t: torch.Tensor, frame_next: torch.Tensor) -> torch.Tensor:
        z, _ = self.embed(frame_t, frame_next)
        return self.action_head(z)


def build_model(cfg: ModelConfig, seed: int = 0, kind: str = "navigation") -> nn.Module:
    """Construct a model with weights determined entirely by ``seed``."""
    cls = {"navigation": NavigationModel, "idm": InverseDynamicsModel}[kind]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(cfg.validate())


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(B, H, W, 3)`` uint8 -> ``(B, 3, H, W)`` float in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).to(dtype) / 255.0


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ------------------------------------------------------------- checkpoints


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)


class CheckpointMismatchError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: nn.Module, header: Mapping[str, Any] | None = None) -> Path:
    """Write a safetensors archive whose metadata holds a JSON header.

    The header always carries the model config and model kind; callers add
    seed, training step, normalisation scale and so on.
    """
    kind = "idm" if isinstance(model, InverseDynamicsModel) else "navigation"
    full = {"model_config": asdict(model.cfg), "kind": kind, **(header or {})}
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    path = Path(path)
    save_file(tensors, str(path), metadata={"header": json.dumps(full, sort_keys=True)})
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    header = json.loads(meta.get("header", "{}"))
    return load_file(str(path)), header


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict[str, Any]]:
    """Rebuild the model stored at ``path`` and return it with its header."""
    tensors, header = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build_model(cfg, seed=int(header.get("seed", 0)), kind=header.get("kind", "navigation"))
    dtype = next(iter(tensors.values())).dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model, header


def load_encoder_weights(
    model: _TwoImageModel, checkpoint: str | Path | Mapping[str, torch.Tensor], strict: bool = True
) -> LoadReport:
    """Copy matching encoder tensors from ``checkpoint`` into ``model``.

    Only ``encoder.*`` tensors other than the CLS and type tokens are
    considered; heads are never touched. In strict mode any encoder tensor
    that is missing, unknown or wrongly shaped raises
    :class:`CheckpointMismatchError`; otherwise mismatches are reported as
    skipped.
    """
    tensors = read_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else dict(checkpoint)
    own = model.state_dict()
    report = LoadReport()
    problems = []
    updates = {}
    for name, value in sorted(tensors.items()):
        if not name.startswith(ENCODER_PREFIX) or name in _NON_TRANSFERABLE:
            report.skipped.append((name, "not a transferable encoder tensor"))
            continue
        if name not in own:
            problems.append((name, "unknown encoder tensor"))
        elif tuple(own[name].shape) != tuple(value.shape):
            problems.append((name, f"shape {tuple(value.shape)} != {tuple(own[name].shape)}"))
        else:
            updates[name] = value
    wanted = {n for n in own if n.startswith(ENCODER_PREFIX) and n not in _NON_TRANSFERABLE}
    for name in sorted(wanted - set(tensors)):
        problems.append((name, "missing from checkpoint"))
    if strict and problems:
        detail = ", ".join(f"{n} ({why})" for n, why in problems)
        raise CheckpointMismatchError(f"encoder weights do not match: {detail}")
    report.skipped.extend(problems)
    with torch.no_grad():
        for name, value in updates.items():
            own[name].copy_(value.to(own[name].dtype))
            report.loaded.append(name)
    return report
