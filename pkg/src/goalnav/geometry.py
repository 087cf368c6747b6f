"""SE(2) pose algebra for planar navigation.

Conventions: yaw is measured counter-clockwise from world +x and kept in
(-pi, pi]. The agent frame has +x forward and +y to the left. Waypoint
actions are agent-frame motions encoded as ``[dx, dy, cos(dyaw), sin(dyaw)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi
DEGENERATE_HEADING_EPS = 1e-6


class DegenerateHeadingError(ValueError):
    """Raised when a (cos, sin) pair is too short to carry a heading."""


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value: {v!r}")


def wrap_angle(theta: float) -> float:
    """Wrap ``theta`` into (-pi, pi]."""
    theta = float(theta)
    _check_finite(theta)
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite angle in input")
    r = np.remainder(theta + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True)
class Pose:
    """World-frame pose. ``yaw`` is wrapped on construction."""

    x: float
    y: float
    yaw: float

    def __post_init__(self) -> None:
        _check_finite(self.x, self.y, self.yaw)
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def __iter__(self):
        return iter((self.x, self.y, self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


@dataclass(frozen=True)
class RelPose:
    """Pose of a target expressed in a reference pose's agent frame."""

    dx: float
    dy: float
    dyaw: float

    def __post_init__(self) -> None:
        _check_finite(self.dx, self.dy, self.dyaw)
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dyaw", wrap_angle(self.dyaw))

    def __iter__(self):
        return iter((self.dx, self.dy, self.dyaw))

    def encode(self) -> "WaypointAction":
        return WaypointAction(self.dx, self.dy, math.cos(self.dyaw), math.sin(self.dyaw))


@dataclass(frozen=True)
class WaypointAction:
    """Agent-frame motion ``[dx, dy, cos(dyaw), sin(dyaw)]``.

    Encoded labels are unit-norm in the heading pair; raw model outputs
    need not be until passed through :func:`decode_waypoint`.
    """

    dx: float
    dy: float
    cos_dyaw: float
    sin_dyaw: float

    def __iter__(self):
        return iter((self.dx, self.dy, self.cos_dyaw, self.sin_dyaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.cos_dyaw, self.sin_dyaw])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "WaypointAction":
        dx, dy, c, s = (float(v) for v in a)
        return cls(dx, dy, c, s)


IDENTITY_ACTION = WaypointAction(0.0, 0.0, 1.0, 0.0)

ActionLike = Union[RelPose, WaypointAction, Sequence[float], np.ndarray]


def relative_pose(ref: Pose, target: Pose) -> RelPose:
    """Express ``target`` in the agent frame of ``ref``."""
    c, s = math.cos(ref.yaw), math.sin(ref.yaw)
    ex, ey = target.x - ref.x, target.y - ref.y
    return RelPose(c * ex + s * ey, -s * ex + c * ey, target.yaw - ref.yaw)


def compose_forward(ref: Pose, rel: RelPose) -> Pose:
    """Apply ``rel`` from ``ref``; inverse of :func:`relative_pose`."""
    c, s = math.cos(ref.yaw), math.sin(ref.yaw)
    return Pose(
        ref.x + c * rel.dx - s * rel.dy,
        ref.y + s * rel.dx + c * rel.dy,
        ref.yaw + rel.dyaw,
    )


def encode(rel: RelPose) -> WaypointAction:
    return rel.encode()


def _as_vec4(a: ActionLike) -> np.ndarray:
    if isinstance(a, RelPose):
        return a.encode().as_array()
    if isinstance(a, WaypointAction):
        return a.as_array()
    v = np.asarray(a, dtype=np.float64)
    if v.shape != (4,):
        raise ValueError(f"expected a 4-vector, got shape {v.shape}")
    return v


def pose_yaw_distance(a: ActionLike, b: ActionLike) -> float:
    """Squared position-yaw discrepancy between two encoded actions.

    ``(dx_b-dx_a)^2 + (dy_b-dy_a)^2 + (cos_b-cos_a)^2 + (sin_b-sin_a)^2``.
    For two encoded relative poses the heading part equals ``2 - 2 cos(dpsi)``.
    """
    d = _as_vec4(b) - _as_vec4(a)
    return float(np.dot(d, d))


def path_length(poses: Iterable[Union[Pose, Sequence[float]]], exponent: float = 1.0) -> float:
    """Sum of planar step norms raised to ``exponent`` (1 gives path length)."""
    xy = np.array([[p[0], p[1]] for p in (tuple(q) for q in poses)], dtype=np.float64)
    if xy.shape[0] == 0:
        raise ValueError("path_length of an empty pose sequence")
    steps = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
    return float(np.sum(steps**exponent))


def global_indices(T: int, N: int) -> list[int]:
    """Indices ``floor(k*T/N)`` for k = 1..N; the last one is always ``T``."""
    if int(T) != T or int(N) != N:
        raise ValueError("T and N must be integers")
    if T <= 0 or N <= 0:
        raise ValueError(f"T and N must be positive, got T={T}, N={N}")
    return [(k * T) // N for k in range(1, N + 1)]


def decode_waypoint(a: ActionLike) -> RelPose:
    """Turn a raw 4-dim action into a relative pose.

    Raises
    ------
    DegenerateHeadingError
        If ``|(cos, sin)| < 1e-6``; callers typically fall back to ``dyaw = 0``.
    """
    dx, dy, c, s = _as_vec4(a)
    norm = math.hypot(c, s)
    if norm < DEGENERATE_HEADING_EPS:
        raise DegenerateHeadingError(f"heading pair norm {norm:.3g} below {DEGENERATE_HEADING_EPS}")
    return RelPose(dx, dy, math.atan2(s / norm, c / norm))


def decode_waypoint_or_straight(a: ActionLike) -> RelPose:
    """:func:`decode_waypoint` with the ``dyaw = 0`` fallback applied."""
    try:
        return decode_waypoint(a)
    except DegenerateHeadingError:
        dx, dy, _, _ = _as_vec4(a)
        return RelPose(dx, dy, 0.0)


def relative_poses_array(ref: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised relative pose, encoded.

    ``ref`` is ``(3,)`` and ``targets`` ``(n, 3)``; returns ``(n, 4)`` rows of
    ``[dx, dy, cos(dyaw), sin(dyaw)]``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    c, s = math.cos(ref[2]), math.sin(ref[2])
    ex = targets[:, 0] - ref[0]
    ey = targets[:, 1] - ref[1]
    dyaw = targets[:, 2] - ref[2]
    return np.stack([c * ex + s * ey, -s * ex + c * ey, np.cos(dyaw), np.sin(dyaw)], axis=1)
