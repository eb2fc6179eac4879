"""Avatar pose data model and quaternion helpers.

A pose covers up to four tracked nodes (body, head, both hands). Each node
carries a position in meters and a unit quaternion in (x, y, z, w) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Tuple

Vec3 = Tuple[float, float, float]
Quat = Tuple[float, float, float, float]

QUAT_NORM_TOLERANCE = 1e-3
IDENTITY_QUAT: Quat = (0.0, 0.0, 0.0, 1.0)


class Node(IntEnum):
    BODY = 0
    HEAD = 1
    LEFT_HAND = 2
    RIGHT_HAND = 3

    @property
    def flag(self) -> int:
        return 1 << self.value


ALL_NODES_MASK = 0x0F


class PoseError(ValueError):
    """Invalid pose content (bad quaternion, empty node set, flag mismatch)."""


def quat_norm(q: Quat) -> float:
    return math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])


def normalize_quat(q: Quat, tolerance: float | None = QUAT_NORM_TOLERANCE) -> Quat:
    """Return ``q`` scaled to unit length.

    With a ``tolerance``, quaternions whose norm is further than that from 1
    are rejected instead of rescued.
    """
    n = quat_norm(q)
    if n == 0.0 or not math.isfinite(n):
        raise PoseError(f"degenerate quaternion {q!r}")
    if tolerance is not None and abs(n - 1.0) > tolerance:
        raise PoseError(f"quaternion norm {n:.6f} outside 1 +/- {tolerance}")
    if n == 1.0:
        return (float(q[0]), float(q[1]), float(q[2]), float(q[3]))
    return (q[0] / n, q[1] / n, q[2] / n, q[3] / n)


def quat_from_axis_angle(axis: Vec3, angle: float) -> Quat:
    ax, ay, az = axis
    n = math.sqrt(ax * ax + ay * ay + az * az)
    s = math.sin(angle / 2.0) / n
    return (ax * s, ay * s, az * s, math.cos(angle / 2.0))


def quat_mul(a: Quat, b: Quat) -> Quat:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return (
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


def rotate_vec(q: Quat, v: Vec3) -> Vec3:
    x, y, z, _ = quat_mul(quat_mul(q, (v[0], v[1], v[2], 0.0)), (-q[0], -q[1], -q[2], q[3]))
    return (x, y, z)


def slerp(a: Quat, b: Quat, u: float) -> Quat:
    """Shortest-arc spherical interpolation between unit quaternions."""
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
    if dot < 0.0:
        b = (-b[0], -b[1], -b[2], -b[3])
        dot = -dot
    if dot > 0.9995:
        # nearly parallel: sin(theta) ~ 0, fall back to normalized lerp
        out = tuple(a[i] + u * (b[i] - a[i]) for i in range(4))
    else:
        theta = math.acos(min(dot, 1.0))
        sin_theta = math.sin(theta)
        wa = math.sin((1.0 - u) * theta) / sin_theta
        wb = math.sin(u * theta) / sin_theta
        out = tuple(wa * a[i] + wb * b[i] for i in range(4))
    return normalize_quat(out, tolerance=None)  # type: ignore[arg-type]


def lerp3(a: Vec3, b: Vec3, u: float) -> Vec3:
    return (a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), a[2] + u * (b[2] - a[2]))


@dataclass(frozen=True)
class NodeSample:
    position: Vec3
    rotation: Quat = IDENTITY_QUAT


@dataclass(frozen=True)
class AvatarPose:
    """One avatar transform: a sample per present node plus sender time and counter.

    Rotations are renormalized on construction; anything further than
    ``QUAT_NORM_TOLERANCE`` from unit length is rejected.
    """

    nodes: Mapping[Node, NodeSample]
    timestamp_us: int = 0
    seq: int = 0
    _flags: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self) -> None:
        if not self.nodes:
            raise PoseError("pose must carry at least one node")
        fixed = {}
        flags = 0
        for node in sorted(self.nodes):
            sample = self.nodes[node]
            node = Node(node)
            flags |= node.flag
            rot = normalize_quat(sample.rotation)
            if rot != sample.rotation:
                sample = NodeSample(sample.position, rot)
            fixed[node] = sample
        object.__setattr__(self, "nodes", fixed)
        object.__setattr__(self, "_flags", flags)

    @classmethod
    def trusted(cls, nodes: dict[Node, NodeSample], flags: int, timestamp_us: int, seq: int) -> "AvatarPose":
        """Build without validation from nodes that are already in ``Node``
        order with unit quaternions (the decoder checks both)."""
        self = object.__new__(cls)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "timestamp_us", timestamp_us)
        object.__setattr__(self, "seq", seq)
        object.__setattr__(self, "_flags", flags)
        return self

    @property
    def node_flags(self) -> int:
        return self._flags

    @classmethod
    def identity(cls, timestamp_us: int = 0, seq: int = 0) -> "AvatarPose":
        origin = NodeSample((0.0, 0.0, 0.0), IDENTITY_QUAT)
        return cls({n: origin for n in Node}, timestamp_us, seq)


class InterpolationStats:
    clamped = 0


def interpolate(a: NodeSample, b: NodeSample, u: float) -> NodeSample:
    """Blend two node samples: linear in position, slerp in rotation.

    ``u`` outside [0, 1] is clamped and tallied in ``InterpolationStats.clamped``.
    """
    if u < 0.0 or u > 1.0 or u != u:
        InterpolationStats.clamped += 1
        u = 0.0 if (u != u or u < 0.0) else 1.0
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    return NodeSample(lerp3(a.position, b.position, u), slerp(a.rotation, b.rotation, u))
