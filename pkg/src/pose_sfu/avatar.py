"""Synthetic avatar motion, tick-driven publishing and the receiver-side pose store."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable

from .pose import (
    AvatarPose,
    Node,
    NodeSample,
    Quat,
    Vec3,
    interpolate,
    quat_from_axis_angle,
    quat_mul,
    rotate_vec,
)
from .wire import encode_pose

HEAD_HEIGHT_M = 1.6
HAND_HEIGHT_M = 1.0
HAND_SPREAD_M = 0.25
MIN_RATE_HZ = 1.0
MAX_RATE_HZ = 60.0
DEFAULT_RATE_HZ = 10.0

APPLIED = "applied"
STALE = "stale-ignored"

_Y = (0.0, 1.0, 0.0)
_X = (1.0, 0.0, 0.0)


@dataclass(frozen=True)
class MotionProfile:
    """Parameters for a synthetic walker. The pose at time t depends only on
    these fields (the seed fixes the head-bob and hand-swing phases)."""

    seed: int = 0
    walk_radius_m: float = 2.0
    angular_speed_rad_s: float = 0.5
    bob_amplitude_m: float = 0.03
    bob_frequency_hz: float = 1.8
    hand_swing_amplitude_m: float = 0.15
    hand_swing_frequency_hz: float = 0.9
    _phases: tuple[float, float] = field(init=False, repr=False, compare=False, default=(0.0, 0.0))

    def __post_init__(self) -> None:
        rng = random.Random(self.seed)
        object.__setattr__(self, "_phases", (rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)))

    @property
    def period_s(self) -> float:
        return 2 * math.pi / self.angular_speed_rad_s


def sample_local_pose(profile: MotionProfile, t_us: int, seq: int = 0) -> AvatarPose:
    """Counter-clockwise walk on a circle in the x-z plane (y up), starting at
    (radius, 0, 0), facing the direction of travel."""
    if t_us < 0:
        raise ValueError("t_us must be >= 0")
    t = t_us / 1e6
    theta = profile.angular_speed_rad_s * t
    r = profile.walk_radius_m
    body_pos: Vec3 = (r * math.cos(theta), 0.0, r * math.sin(theta))
    body_rot = quat_from_axis_angle(_Y, -theta)

    bob_phase, hand_phase = profile._phases
    bob = math.sin(2 * math.pi * profile.bob_frequency_hz * t + bob_phase)
    head_pos = (body_pos[0], HEAD_HEIGHT_M + profile.bob_amplitude_m * bob, body_pos[2])
    head_rot = quat_mul(body_rot, quat_from_axis_angle(_X, 0.1 * bob))

    swing = profile.hand_swing_amplitude_m * math.sin(
        2 * math.pi * profile.hand_swing_frequency_hz * t + hand_phase
    )
    nodes = {
        Node.BODY: NodeSample(body_pos, body_rot),
        Node.HEAD: NodeSample(head_pos, head_rot),
        Node.LEFT_HAND: NodeSample(_offset(body_pos, body_rot, (HAND_SPREAD_M, HAND_HEIGHT_M, swing)), body_rot),
        Node.RIGHT_HAND: NodeSample(_offset(body_pos, body_rot, (-HAND_SPREAD_M, HAND_HEIGHT_M, -swing)), body_rot),
    }
    return AvatarPose(nodes, t_us, seq)


def _offset(origin: Vec3, rot: Quat, local: Vec3) -> Vec3:
    v = rotate_vec(rot, local)
    return (origin[0] + v[0], origin[1] + v[1], origin[2] + v[2])


class TickPublisher:
    """Emits one encoded pose per tick at ``rate_hz``, starting at ``start_us``.

    ``due(now_us)`` returns every tick that has come due since the last call,
    so a late driver catches up instead of silently skipping ticks.
    """

    def __init__(
        self,
        profile: MotionProfile,
        avatar_id: int,
        rate_hz: float = DEFAULT_RATE_HZ,
        *,
        start_us: int = 0,
        stop_us: int | None = None,
    ):
        if not MIN_RATE_HZ <= rate_hz <= MAX_RATE_HZ:
            raise ValueError(f"transform rate {rate_hz} Hz outside [{MIN_RATE_HZ:g}, {MAX_RATE_HZ:g}]")
        self.profile = profile
        self.avatar_id = avatar_id
        self.rate_hz = rate_hz
        self.start_us = start_us
        self.stop_us = stop_us
        self.emitted = 0

    def tick_time_us(self, k: int) -> int:
        return self.start_us + round(k * 1e6 / self.rate_hz)

    @property
    def next_due_us(self) -> int | None:
        t = self.tick_time_us(self.emitted)
        if self.stop_us is not None and t >= self.stop_us:
            return None
        return t

    def due(self, now_us: int) -> list[tuple[bytes, int, int]]:
        out = []
        while True:
            t = self.next_due_us
            if t is None or t > now_us:
                return out
            seq = self.emitted
            pose = sample_local_pose(self.profile, t, seq)
            out.append((encode_pose(pose, self.avatar_id), t, seq))
            self.emitted += 1


def tick_publish(publisher: TickPublisher, now_us: int, send: Callable[[bytes, int, int], object]) -> int:
    """Send every pose due at ``now_us`` through ``send(payload, timestamp_us, seq)``."""
    frames = publisher.due(now_us)
    for payload, ts, seq in frames:
        send(payload, ts, seq)
    return len(frames)


class PoseStore:
    """Last-writer-wins store of remote avatar poses, keyed on sender timestamp.

    Each (avatar, node) keeps its latest and previous sample so playback can
    interpolate between them.
    """

    def __init__(self) -> None:
        self.latest: dict[int, dict[Node, tuple[int, NodeSample]]] = {}
        self.previous: dict[int, dict[Node, tuple[int, NodeSample]]] = {}
        self.applied: dict[int, int] = {}
        self.stale: dict[int, int] = {}

    def apply(self, avatar_id: int, pose: AvatarPose) -> str:
        ts = pose.timestamp_us
        latest = self.latest.get(avatar_id)
        if latest is None:
            latest = self.latest[avatar_id] = {}
            self.previous[avatar_id] = {}
        previous = self.previous[avatar_id]
        changed = False
        for node, sample in pose.nodes.items():
            cur = latest.get(node)
            if cur is None or ts > cur[0]:
                if cur is not None:
                    previous[node] = cur
                latest[node] = (ts, sample)
                changed = True
        if changed:
            self.applied[avatar_id] = self.applied.get(avatar_id, 0) + 1
            return APPLIED
        self.stale[avatar_id] = self.stale.get(avatar_id, 0) + 1
        return STALE

    def received(self, avatar_id: int) -> int:
        return self.applied.get(avatar_id, 0) + self.stale.get(avatar_id, 0)

    def avatars(self) -> list[int]:
        return sorted(self.latest)

    def snapshot(self, avatar_id: int) -> dict[Node, tuple[int, NodeSample]]:
        return dict(self.latest.get(avatar_id, {}))

    def render(self, avatar_id: int, render_time_us: int) -> dict[Node, NodeSample]:
        """Interpolated node samples at ``render_time_us`` (callers typically
        render one tick interval in the past so two samples bracket it)."""
        out = {}
        prev = self.previous.get(avatar_id, {})
        for node, (tb, b) in self.latest.get(avatar_id, {}).items():
            pa = prev.get(node)
            if pa is None or tb == pa[0]:
                out[node] = b
                continue
            ta, a = pa
            out[node] = interpolate(a, b, (render_time_us - ta) / (tb - ta))
        return out


def apply_remote(store: PoseStore, avatar_id: int, pose: AvatarPose) -> str:
    return store.apply(avatar_id, pose)

