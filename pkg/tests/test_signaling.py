from __future__ import annotations

import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harness import CoreHarness, FakeLink, PeerChannels
from oracles import relay_oracle
from pose_sfu.signaling import (
    LEGAL_TRANSITIONS,
    IllegalTransition,
    RelayHub,
    SessionState,
    SignalingSession,
    UnregisteredConnection,
)
from pose_sfu.sfu import SFU
from pose_sfu.wire import (
    Frame,
    FrameType,
    StreamDecoder,
    decode_frame,
    decode_signal,
    encode_frame,
    encode_signal,
    encode_stream_record,
    signal,
)

ADDR = ("10.0.0.1", 4000)


def _bound(h: CoreHarness, cid: str = "a", addr=ADDR) -> tuple[FakeLink, PeerChannels]:
    link = h.join(cid)
    assert h.bind(addr, h.token(link))
    return link, PeerChannels(h, addr)


def _takeover(h: CoreHarness, cid: str = "a", addr=ADDR) -> tuple[FakeLink, PeerChannels]:
    link, peer = _bound(h, cid, addr)
    h.text(link, "switch")
    peer.pump(h.now)
    return link, peer


# -- join ----------------------------------------------------------------------------


def test_valid_join_gets_accept():
    h = CoreHarness(udp_host="127.0.0.1", udp_port=9000)
    link = h.join("a")
    (accept,) = link.messages()
    assert accept.type == "accept"
    assert len(accept["token"]) == 32 and bytes.fromhex(accept["token"])
    assert (accept["udp_host"], accept["udp_port"]) == ("127.0.0.1", 9000)
    assert set(accept["channels"]) == {"0", "1", "2", "3"}
    assert accept["channels"]["1"] == {"mode": 0}
    assert accept["channels"]["2"] == {"mode": 4}
    assert accept["channels"]["3"] == {"mode": 2, "max_retransmits": 1}
    assert h.core.session_for("a").state is SessionState.WS_ESTABLISHED


def test_join_full_room():
    sfu = SFU()
    sfu.create_room("r1", 2)
    h = CoreHarness(sfu=sfu)
    h.join("a")
    h.join("b")
    link = h.join("c")
    msgs = link.messages()
    assert msgs[-1].type == "error" and msgs[-1]["code"] == "room_full"
    assert link.closed


def test_join_unknown_room_without_auto_create():
    h = CoreHarness(auto_create_rooms=False)
    link = h.join("a")
    assert link.messages()[-1]["code"] == "unknown_room" and link.closed


def test_second_join_is_protocol_error():
    h = CoreHarness()
    link = h.join("a")
    h.text(link, "join", room_id="r1", client_id="a", condition="delegated")
    assert link.types() == ["accept", "error"]
    assert link.closed
    assert h.core.counters["protocol_errors"] == 1
    assert "a" not in h.core.sfu.rooms["r1"].members


def test_bad_condition_and_garbage_text():
    h = CoreHarness()
    link = h.join("a", condition="mesh")
    assert link.messages()[-1]["code"] == "bad_condition"
    link2 = FakeLink("x")
    h.core.on_text(link2, "not json", 0.0)
    assert link2.closed and link2.types() == ["error"]


def test_peer_events():
    h = CoreHarness()
    a = h.join("a")
    b = h.join("b")
    assert decode_signal(b.texts[0])["peers"] == ["a"]
    assert a.types() == ["accept", "peer_joined"]
    h.text(b, "leave")
    assert a.types()[-1] == "peer_left"


# -- bind ----------------------------------------------------------------------------


def test_bind_with_correct_token():
    h = CoreHarness()
    link = h.join("a")
    assert h.bind(ADDR, h.token(link))
    assert h.core.session_for("a").state is SessionState.DATAGRAM_BOUND
    assert link.types()[-1] == "bind_ok"


def test_bind_with_wrong_token_is_silent():
    h = CoreHarness()
    link = h.join("a")
    assert not h.bind(ADDR, bytes(16))
    assert h.core.counters["bind_drops"] == 1
    assert h.core.session_for("a").state is SessionState.WS_ESTABLISHED
    assert h.take(ADDR) == [] and link.types() == ["accept"]


def test_token_replay_from_other_address_dropped():
    h = CoreHarness()
    link = h.join("a")
    tok = h.token(link)
    assert h.bind(ADDR, tok)
    assert not h.bind(("10.0.0.2", 4000), tok)
    assert h.core.counters["bind_drops"] == 1
    assert h.core.session_for("a").addr == ADDR


def test_stray_datagrams_counted():
    h = CoreHarness()
    h.core.on_datagram(ADDR, b"junk", 0.0)
    h.core.on_datagram(ADDR, encode_frame(Frame(FrameType.DATA, 1, 0, 0, b"x")), 0.0)
    assert h.core.counters["stray_datagrams"] == 2


# -- switch / takeover ---------------------------------------------------------------------


def test_switch_before_bind():
    h = CoreHarness()
    link = h.join("a")
    h.text(link, "switch")
    err = link.messages()[-1]
    assert err.type == "error" and err["code"] == "not_bound"
    assert h.core.session_for("a").state is SessionState.WS_ESTABLISHED


def test_switch_ok_on_both_paths_once():
    h = CoreHarness()
    link, peer = _takeover(h)
    assert link.types().count("switch_ok") == 1
    assert peer.signals().count("switch_ok") == 1
    assert h.core.session_for("a").state is SessionState.TAKEOVER
    h.text(link, "switch")
    assert link.types().count("switch_ok") == 1


def test_ws_close_after_takeover_keeps_forwarding():
    h = CoreHarness()
    link_a, pa = _takeover(h, "a", ("10.0.0.1", 1))
    link_b, pb = _takeover(h, "b", ("10.0.0.2", 2))
    h.core.on_link_closed(link_a, 1.0)
    sess = h.core.session_for("a")
    assert sess.state is SessionState.TAKEOVER
    assert h.core.counters["sessions_closed"] == 0
    for k in range(20):
        pa.cs.send(1, f"pose{k}".encode(), 10.0 + k)
        pa.pump(10.0 + k)
        pb.pump(10.0 + k)
    got = [f.payload for f in pb.received if f.frame_type == FrameType.DATA and f.channel_id == 1]
    assert got == [f"pose{k}".encode() for k in range(20)]
    # signaling still round-trips on channel 0
    pa.cs.send_control(FrameType.PING, 50.0, seq=7)
    pa.pump(50.0)
    pongs = [f for f in pa.pump(51.0) + pa.received if f.frame_type == FrameType.PONG]
    assert pongs and pongs[0].seq == 7


def test_leave_over_channel_zero_closes_cleanly():
    h = CoreHarness()
    link, peer = _takeover(h)
    h.core.on_link_closed(link, 1.0)
    peer.send_signal("leave", 2.0)
    peer.pump(2.0)
    assert h.core.session_for("a") is None
    assert h.core.closed_log[-1] == ("a", "leave")
    assert "a" not in h.core.sfu.rooms["r1"].members


def test_peer_events_travel_over_datagrams_after_takeover():
    h = CoreHarness()
    link, peer = _takeover(h)
    h.core.on_link_closed(link, 1.0)
    h.join("b")
    peer.pump(3.0)
    assert "peer_joined" in peer.signals()


def test_ws_close_before_takeover_closes_session():
    h = CoreHarness()
    link, _ = _bound(h)
    h.core.on_link_closed(link, 1.0)
    assert h.core.counters["sessions_closed"] == 1
    assert "a" not in h.core.sfu.rooms["r1"].members


def test_slow_consumer_eviction_sends_error():
    sfu = SFU(queue_cap=8)
    h = CoreHarness(sfu=sfu)
    _, pa = _takeover(h, "a", ("h", 1))
    link_b, pb = _takeover(h, "b", ("h", 2))
    # b never pumps, so its subscriber queue overflows on the reliable channel
    for k in range(20):
        pa.cs.send(1, b"p", float(k))
        for dg in pa.cs.drain(float(k)):
            h.core.on_datagram(("h", 1), dg, float(k))
    assert sfu.counters["evictions"] == 1
    assert h.core.closed_log[-1] == ("b", "slow_consumer")
    pb.pump(100.0)
    assert "error" in pb.signals()


# -- state machine ---------------------------------------------------------------------------


def test_illegal_transition_raises():
    s = SignalingSession(link=None)
    with pytest.raises(IllegalTransition):
        s.transition(SessionState.TAKEOVER)
    s.transition(SessionState.CLOSED)
    with pytest.raises(IllegalTransition):
        s.transition(SessionState.WS_ESTABLISHED)


ACTIONS = ("join", "join_again", "bind", "bind_wrong", "switch", "leave_ws", "leave_dgram",
           "ws_close", "ping", "garbage", "publish", "close_frame")


@settings(max_examples=400)
@given(st.lists(st.sampled_from(ACTIONS), max_size=25))
def test_random_orderings_only_take_legal_transitions(actions):
    h = CoreHarness()
    link = FakeLink("a")
    h.core.on_link_open(link, 0.0)
    peer = PeerChannels(h, ADDR)
    sessions = [h.core.sessions[link]]
    for t, act in enumerate(actions):
        h.now = float(t)
        if act in ("join", "join_again"):
            h.text(link, "join", room_id="r1", client_id="a", condition="delegated")
        elif act == "bind":
            accepts = [m for m in link.messages() if m.type == "accept"]
            if accepts:
                h.bind(ADDR, bytes.fromhex(accepts[-1]["token"]))
        elif act == "bind_wrong":
            h.bind(ADDR, b"\x01" * 16)
        elif act == "switch":
            h.text(link, "switch")
        elif act == "leave_ws":
            h.text(link, "leave")
        elif act == "leave_dgram":
            peer.send_signal("leave", float(t))
        elif act == "ws_close":
            h.core.on_link_closed(link, float(t))
        elif act == "ping":
            peer.cs.send_control(FrameType.PING, float(t))
        elif act == "garbage":
            h.core.on_datagram(ADDR, b"\x4d\x56garbage", float(t))
        elif act == "publish":
            peer.cs.send(1, b"p", float(t))
        elif act == "close_frame":
            peer.cs.send_control(FrameType.CLOSE, float(t))
        peer.pump(float(t))
        s = h.core.sessions.get(link)
        if s is not None and s not in sessions:
            sessions.append(s)
    for s in sessions:
        for a, b in zip(s.history, s.history[1:]):
            assert (a, b) in LEGAL_TRANSITIONS
        assert s.history.count(SessionState.CLOSED) <= 1


def test_tokens_single_use_and_unique():
    h = CoreHarness()
    tokens = set()
    for i in range(50):
        link = h.join(f"c{i}")
        tok = h.token(link)
        assert tok not in tokens
        tokens.add(tok)
        assert h.bind((f"h{i}", 1), tok)
        assert not h.bind((f"h{i}", 2), tok)
    assert h.core.counters["bind_drops"] == 50


# -- relay hub -----------------------------------------------------------------------------


def _pose_frame(seq: int) -> bytes:
    return encode_frame(Frame(FrameType.DATA, 1, seq, 0, seq.to_bytes(4, "big")))


def _hub(n: int) -> RelayHub:
    hub = RelayHub(keep_log=100_000)
    for i in range(n):
        hub.connect(f"k{i}")
        hub.register(f"k{i}", "r1", f"c{i}")
    return hub


def test_relay_twelve():
    hub = _hub(12)
    assert hub.relay_transform("k0", _pose_frame(0)) == 11
    out = dict(hub.take_output())
    assert "k0" not in out and len(out) == 11
    for data in out.values():
        (rec,) = StreamDecoder().feed(data)
        assert rec == _pose_frame(0)
        assert data[:4] == len(rec).to_bytes(4, "big")


def test_relay_two():
    assert _hub(2).relay_transform("k1", _pose_frame(0)) == 1


def test_relay_unregistered():
    with pytest.raises(UnregisteredConnection):
        _hub(2).relay_transform("ghost", _pose_frame(0))


@pytest.mark.parametrize("seed", range(20))
def test_relay_random_trace_matches_oracle(seed):
    rng = random.Random(seed)
    hub = _hub(3)
    msgs = []
    per = Counter()
    order = [f"c{i}" for i in range(3) for _ in range(20)]
    rng.shuffle(order)
    for sender in order:
        msgs.append((sender, per[sender]))
        hub.relay_transform(f"k{sender[1:]}", _pose_frame(per[sender]))
        per[sender] += 1
    assert Counter(hub.log) == relay_oracle(["c0", "c1", "c2"], msgs)
    assert sum(Counter(hub.log).values()) == 120


def _record(frame: bytes) -> bytes:
    return encode_stream_record(frame)


def test_relay_stream_registration_and_chunked_fanout():
    hub = RelayHub()
    join = lambda c: _record(encode_frame(Frame(FrameType.SIGNAL, 0, 0, 0, encode_signal(
        signal("join", room_id="r1", client_id=c, condition="baseline")).encode())))
    for c in ("a", "b", "c"):
        hub.on_stream_bytes(c, join(c))
    out = dict(hub.take_output())
    for c in ("a", "b", "c"):
        (rec,) = StreamDecoder().feed(out[c])
        assert decode_signal(decode_frame(rec).payload).type == "bind_ok"
    stream = b"".join(_record(_pose_frame(k)) for k in range(10))
    for i in range(0, len(stream), 7):
        hub.on_stream_bytes("a", stream[i:i + 7])
    out = dict(hub.take_output())
    assert set(out) == {"b", "c"}
    recs = StreamDecoder().feed(out["b"])
    assert [decode_frame(r).seq for r in recs] == list(range(10))


def test_relay_rejects_data_before_join():
    hub = RelayHub()
    hub.on_stream_bytes("x", _record(_pose_frame(0)))
    assert hub.counters["bad_records"] == 1
    assert hub.take_output() == []


def test_relay_disconnect_removes_member():
    hub = _hub(3)
    hub.disconnect("k2")
    assert hub.relay_transform("k0", _pose_frame(0)) == 1
    hub.disconnect("k0")
    hub.disconnect("k1")
    assert hub.rooms == {}
