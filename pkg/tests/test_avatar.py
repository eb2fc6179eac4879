from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation, Slerp

from oracles import lww_oracle, slerp_closed_form
from strategies import unit_quats
from pose_sfu.avatar import (
    APPLIED,
    HEAD_HEIGHT_M,
    STALE,
    MotionProfile,
    PoseStore,
    TickPublisher,
    apply_remote,
    sample_local_pose,
    tick_publish,
)
from pose_sfu.pose import (
    AvatarPose,
    InterpolationStats,
    Node,
    NodeSample,
    PoseError,
    interpolate,
    quat_from_axis_angle,
    quat_norm,
    slerp,
)

IDENT = (0.0, 0.0, 0.0, 1.0)
Z90 = (0.0, 0.0, math.sin(math.pi / 4), math.cos(math.pi / 4))


def _pose(ts: int, value: float = 0.0, nodes=tuple(Node)) -> AvatarPose:
    return AvatarPose({n: NodeSample((value, 0.0, 0.0)) for n in nodes}, ts)


# -- pose data model ---------------------------------------------------------------------


def test_pose_requires_a_node():
    with pytest.raises(PoseError):
        AvatarPose({})


def test_pose_renormalizes_and_rejects():
    p = AvatarPose({Node.HEAD: NodeSample((0, 0, 0), (0, 0, 0, 1.0004))})
    assert quat_norm(p.nodes[Node.HEAD].rotation) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(PoseError):
        AvatarPose({Node.HEAD: NodeSample((0, 0, 0), (0, 0, 0, 1.01))})


# -- motion profile ------------------------------------------------------------------------


def test_phase_zero_position():
    pose = sample_local_pose(MotionProfile(seed=3, walk_radius_m=2.0, angular_speed_rad_s=0.7), 0)
    assert pose.nodes[Node.BODY].position == (2.0, 0.0, 0.0)


def test_quarter_period_counter_clockwise():
    prof = MotionProfile(walk_radius_m=2.0, angular_speed_rad_s=0.5)
    t_us = round(prof.period_s / 4 * 1e6)
    x, y, z = sample_local_pose(prof, t_us).nodes[Node.BODY].position
    # closed form: (r cos(pi/2), 0, r sin(pi/2))
    assert (x, y, z) == pytest.approx((0.0, 0.0, 2.0), abs=1e-5)


def test_sampling_is_deterministic():
    a = sample_local_pose(MotionProfile(seed=11), 1_234_567)
    b = sample_local_pose(MotionProfile(seed=11), 1_234_567)
    assert a == b
    c = sample_local_pose(MotionProfile(seed=12), 1_234_567)
    assert c.nodes[Node.HEAD] != a.nodes[Node.HEAD]


@given(st.integers(0, 10**12), st.integers(0, 1000))
def test_sampled_pose_shape(t_us, seed):
    prof = MotionProfile(seed=seed)
    pose = sample_local_pose(prof, t_us)
    assert set(pose.nodes) == set(Node)
    bx, by, bz = pose.nodes[Node.BODY].position
    assert math.hypot(bx, bz) == pytest.approx(prof.walk_radius_m)
    hx, hy, hz = pose.nodes[Node.HEAD].position
    assert (hx, hz) == (bx, bz)
    assert abs(hy - HEAD_HEIGHT_M) <= prof.bob_amplitude_m + 1e-12
    for s in pose.nodes.values():
        assert abs(quat_norm(s.rotation) - 1.0) <= 1e-9


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        sample_local_pose(MotionProfile(), -1)


# -- tick publication -------------------------------------------------------------------------


def test_ten_hz_for_sixty_seconds():
    pub = TickPublisher(MotionProfile(), 1, 10.0, start_us=0, stop_us=60_000_000)
    sent = []
    now = 0
    while now <= 61_000_000:
        tick_publish(pub, now, lambda p, ts, seq: sent.append((ts, seq)))
        now += 7_000
    assert abs(len(sent) - 600) <= 1
    assert [s for _, s in sent] == list(range(len(sent)))
    assert all(0 <= ts < 60_000_000 for ts, _ in sent)


@pytest.mark.parametrize("rate", [0, 0.5, 61, -10])
def test_rate_out_of_range(rate):
    with pytest.raises(ValueError):
        TickPublisher(MotionProfile(), 1, rate)


@given(st.floats(1, 60), st.floats(1, 120))
def test_emission_count_formula(rate, dur_s):
    pub = TickPublisher(MotionProfile(), 1, rate, start_us=0, stop_us=int(dur_s * 1e6))
    n = len(pub.due(int(dur_s * 1e6) + 10**6))
    assert abs(n - math.floor(dur_s * rate)) <= 1


def test_late_driver_catches_up():
    pub = TickPublisher(MotionProfile(), 1, 10.0)
    assert len(pub.due(0)) == 1
    assert len(pub.due(1_000_000)) == 10


def test_identical_seeds_identical_byte_streams():
    def stream(seed):
        pub = TickPublisher(MotionProfile(seed=seed), 4, 20.0, start_us=0, stop_us=5_000_000)
        return b"".join(p for p, _, _ in pub.due(5_000_000))

    assert stream(9) == stream(9)
    assert stream(9) != stream(10)


# -- last-writer-wins store ---------------------------------------------------------------------


def test_empty_store_applies():
    assert apply_remote(PoseStore(), 1, _pose(5)) == APPLIED


def test_older_sample_ignored():
    store = PoseStore()
    assert store.apply(1, _pose(100, 1.0)) == APPLIED
    assert store.apply(1, _pose(50, 2.0)) == STALE
    snap = store.snapshot(1)
    assert all(ts == 100 and s.position[0] == 1.0 for ts, s in snap.values())
    assert store.received(1) == 2


def test_equal_timestamp_is_stale():
    store = PoseStore()
    store.apply(1, _pose(100, 1.0))
    assert store.apply(1, _pose(100, 2.0)) == STALE


@pytest.mark.parametrize("seed", range(20))
def test_shuffled_timestamps_converge_to_max(seed):
    samples = [(ts, _pose(ts, ts / 10)) for ts in range(10, 101, 10)]
    random.Random(seed).shuffle(samples)
    store = PoseStore()
    for ts, p in samples:
        store.apply(7, p)
    best_ts, best = lww_oracle(samples)
    assert best_ts == 100
    assert {n: s for n, (_, s) in store.snapshot(7).items()} == best.nodes


@settings(max_examples=300)
@given(st.lists(st.tuples(st.integers(0, 10**6), st.sets(st.sampled_from(list(Node)), min_size=1)),
                min_size=1, max_size=30, unique_by=lambda x: x[0]), st.randoms())
def test_lww_permutation_property_per_node(samples, rnd):
    poses = [AvatarPose({n: NodeSample((float(ts), float(n), 0.0)) for n in nodes}, ts) for ts, nodes in samples]
    rnd.shuffle(poses)
    store = PoseStore()
    for p in poses:
        store.apply(3, p)
    snap = store.snapshot(3)
    for node in Node:
        having = [(p.timestamp_us, p.nodes[node]) for p in poses if node in p.nodes]
        if not having:
            assert node not in snap
        else:
            assert snap[node] == lww_oracle(having)


def test_store_keeps_previous_for_interpolation():
    store = PoseStore()
    store.apply(1, _pose(0, 0.0))
    store.apply(1, _pose(100_000, 1.0))
    out = store.render(1, 50_000)
    assert out[Node.BODY].position == pytest.approx((0.5, 0.0, 0.0))
    assert store.render(1, 200_000)[Node.BODY].position == (1.0, 0.0, 0.0)


# -- interpolation ---------------------------------------------------------------------------


def test_endpoints():
    a = NodeSample((0.0, 0.0, 0.0), IDENT)
    b = NodeSample((1.0, 2.0, 3.0), Z90)
    assert interpolate(a, b, 0.0) == a
    assert interpolate(a, b, 1.0) == b


def test_position_midpoint():
    a = NodeSample((0.0, 0.0, 0.0))
    b = NodeSample((1.0, 0.0, 0.0))
    assert interpolate(a, b, 0.5).position == (0.5, 0.0, 0.0)


def test_slerp_45_degrees():
    q = interpolate(NodeSample((0, 0, 0), IDENT), NodeSample((0, 0, 0), Z90), 0.5).rotation
    expected = (0.0, 0.0, 0.3826834, 0.9238795)
    assert all(abs(a - b) <= 1e-6 for a, b in zip(q, expected))
    assert all(abs(a - b) <= 1e-12 for a, b in zip(q, slerp_closed_form(IDENT, Z90, 0.5)))


def test_shortest_arc_sign_correction():
    neg = tuple(-c for c in Z90)
    assert slerp(IDENT, neg, 0.5) == pytest.approx(slerp(IDENT, Z90, 0.5))


def test_out_of_range_u_clamped_and_counted():
    a = NodeSample((0.0, 0.0, 0.0))
    b = NodeSample((1.0, 0.0, 0.0))
    before = InterpolationStats.clamped
    assert interpolate(a, b, -0.5) == a
    assert interpolate(a, b, 1.5) == b
    assert interpolate(a, b, float("nan")) == a
    assert InterpolationStats.clamped == before + 3


@settings(max_examples=500)
@given(unit_quats(), unit_quats(), st.floats(0, 1))
def test_slerp_matches_scipy(a, b, u):
    got = np.array(slerp(a, b, u))
    assert abs(np.linalg.norm(got) - 1.0) <= 1e-6
    ref = Slerp([0.0, 1.0], Rotation.from_quat([a, b]))([u]).as_quat()[0]
    # q and -q encode the same rotation
    err = min(np.abs(got - ref).max(), np.abs(got + ref).max())
    assert err <= 1e-4


@given(unit_quats(), unit_quats())
def test_slerp_endpoint_identity(a, b):
    assert max(abs(x - y) for x, y in zip(slerp(a, b, 0.0), a)) <= 1e-7
    assert max(abs(x - y) for x, y in zip(slerp(a, b, 1.0), b)) <= 1e-7


@given(st.floats(-math.pi, math.pi))
def test_axis_angle_is_unit(angle):
    assert abs(quat_norm(quat_from_axis_angle((0.0, 1.0, 0.0), angle)) - 1.0) <= 1e-12
