from __future__ import annotations

import pytest

from pose_sfu.client import ClientConfig
from pose_sfu.sfu import ForwardLog
from pose_sfu.sim import LinkParams, LoopbackNetwork, SimDeployment
from pose_sfu.swarm import FORWARD_LOG_FILE, RunConfig, load_artifact, run_swarm

CLIENTS = 6
DURATION = 30.0


def _run(condition: str, **kw):
    cfg = RunConfig(condition=condition, clients=CLIENTS, duration_s=DURATION, transport="loopback", **kw)
    return run_swarm(cfg, keep_deployment=True)


@pytest.fixture(scope="module")
def delegated():
    return _run("delegated")


@pytest.fixture(scope="module")
def baseline():
    return _run("baseline")


def _conservation(art) -> None:
    avatar_of = art.extras["avatar_of"]
    sent = art.extras["sent_per_client"]
    got = art.extras["observed_received_per_avatar"]
    observed = art.extras["observed_client"]
    for cid, n in sent.items():
        if cid == observed:
            assert str(avatar_of[cid]) not in got
        else:
            assert got[str(avatar_of[cid])] == n
    assert all(n == DURATION * 10 for n in sent.values())


def test_delegated_conserves_every_pose(delegated):
    _conservation(delegated)


def test_baseline_conserves_every_pose(baseline):
    _conservation(baseline)


@pytest.mark.parametrize("name", ["delegated", "baseline"])
def test_windows_reconcile_with_socket_totals(name, request):
    art = request.getfixturevalue(name)
    st = art.socket_totals
    dep = art.extras["_deployment"]
    assert (st["udp_sent_end"], st["udp_received_end"]) == dep.udp_totals("client-000")
    got = sum(s.bytes_received for s in art.bitrate) + art.final_window.bytes_received
    sent = sum(s.bytes_sent for s in art.bitrate) + art.final_window.bytes_sent
    assert got == st["udp_received_end"] - st["udp_received_start"]
    assert sent == st["udp_sent_end"] - st["udp_sent_start"]
    assert len(art.bitrate) == DURATION / 3


def test_audio_only_send_rate(baseline):
    # baseline poses ride the relay stream, so the datagram path carries audio only
    assert baseline.summary.sent_mean == pytest.approx(56_000, rel=0.05)


def test_conditions_are_isolated(delegated, baseline):
    d_dep, b_dep = delegated.extras["_deployment"], baseline.extras["_deployment"]
    d_stream = sum(d_dep.stream_totals(c)[0] for c in d_dep.clients)
    b_stream = sum(b_dep.stream_totals(c)[0] for c in b_dep.clients)
    # delegated clients only register on the relay; baseline poses all go there
    assert d_stream < 200 * CLIENTS
    assert b_stream > 100 * CLIENTS * DURATION * 10
    audio_frames = CLIENTS * 50 * DURATION
    assert baseline.extras["server"]["counters"]["forwarded_in"] == audio_frames
    assert delegated.extras["server"]["counters"]["forwarded_in"] == audio_frames + CLIENTS * DURATION * 10


def test_delegated_receives_more_than_baseline(delegated, baseline):
    assert delegated.summary.received_mean > baseline.summary.received_mean


def test_forward_log_deterministic_for_equal_seeds(tmp_path):
    cfg = RunConfig(condition="delegated", clients=4, duration_s=30, transport="loopback", seed=5)
    a = run_swarm(cfg, tmp_path / "a")
    b = run_swarm(cfg, tmp_path / "b")
    fa = (a.path / FORWARD_LOG_FILE).read_bytes()
    assert fa == (b.path / FORWARD_LOG_FILE).read_bytes()
    assert fa.count(b"\n") > 4 * 300
    assert (a.path / "bitrate.csv").read_bytes() == (b.path / "bitrate.csv").read_bytes()


def test_artifact_round_trip(tmp_path):
    art = run_swarm(RunConfig(condition="baseline", clients=3, duration_s=30, transport="loopback"), tmp_path)
    loaded, bad = load_artifact(art.path)
    assert bad == 0 and not loaded.partial
    assert loaded.summary == art.summary
    assert loaded.bitrate == art.bitrate and loaded.load == art.load


def test_lossy_loopback_delivers_every_pose_by_retransmission():
    art = _run("delegated", loss=0.05, latency_ms=20, jitter_ms=5, seed=3)
    _conservation(art)
    assert art.extras["server"]["channels"]["retransmits"] > 0


def test_ws_kill_after_takeover_keeps_udp_flowing():
    net = LoopbackNetwork(seed=1)
    dep = SimDeployment(net, forward_log=ForwardLog())
    clients = [dep.add_client(ClientConfig(f"c{i}", avatar_id=i)) for i in range(3)]
    assert dep.wait_ready()
    assert net.run_until_true(lambda: all(c.state == "takeover" for c in clients), 5_000)
    t0 = net.now + 10
    for c in clients:
        c.begin_publishing(t0, t0 + 40_000)
    net.run_until(t0 + 5_000)
    dep.kill_ws("c0")
    net.run_until(t0 + 40_500)
    victim, other = clients[0], clients[1]
    assert not victim.ws_open
    assert other.store.received(0) == victim.poses_published == 400
    assert victim.store.received(1) == 400
    # the victim can still ping and leave over the datagram path
    victim.ping(net.now)
    net.run_for(100)
    assert victim.counters["pongs_received"] >= 1
    dep.remove_client("c0")
    net.run_for(200)
    assert other.counters["peer_left"] >= 1
    assert dep.core.session_for("c0") is None
    dep.stop()


def test_latency_and_jitter_are_applied():
    net = LoopbackNetwork(seed=2, link=LinkParams(0.0, 50.0, 0.0))
    seen = []
    net.bind(("b", 1), lambda data, src, now: seen.append(now))
    net.bind(("a", 1), lambda data, src, now: None)
    net.sendto(("a", 1), ("b", 1), b"x")
    net.run_for(100)
    assert seen == [pytest.approx(50.0)]
