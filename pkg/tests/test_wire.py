from __future__ import annotations

import json
import math
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frame_bytes, pose_bytes
from strategies import frames, poses, signals
from pose_sfu.pose import AvatarPose, Node, NodeSample
from pose_sfu.wire import (
    HEADER_SIZE,
    MAX_DATAGRAM,
    MAX_PAYLOAD,
    BadMagicError,
    BadVersionError,
    Frame,
    FrameType,
    MediaPayload,
    OversizeError,
    PayloadError,
    SignalError,
    StreamDecoder,
    TruncatedError,
    UnknownFrameTypeError,
    WireError,
    bundle_frames,
    decode_frame,
    decode_media,
    decode_pose,
    decode_signal,
    encode_frame,
    encode_media,
    encode_pose,
    encode_signal,
    encode_stream_record,
    pose_payload_size,
    signal,
    split_datagram,
)


def _f32(x: float) -> float:
    return struct.unpack(">f", struct.pack(">f", x))[0]


# -- frames -------------------------------------------------------------------


def test_header_is_twenty_bytes():
    assert HEADER_SIZE == 20
    assert len(encode_frame(Frame(FrameType.DATA, 1, 0, 0))) == 20


def test_full_pose_frame_is_137_bytes():
    payload = encode_pose(AvatarPose.identity(), 7)
    assert len(encode_frame(Frame(FrameType.DATA, 1, 0, 0, payload))) == 137


def test_oversize_payload_rejected():
    with pytest.raises(OversizeError):
        encode_frame(Frame(FrameType.DATA, 1, 0, 0, bytes(2000)))
    # path budget: header plus payload must fit one datagram
    encode_frame(Frame(FrameType.DATA, 1, 0, 0, bytes(MAX_PAYLOAD)))
    with pytest.raises(OversizeError):
        encode_frame(Frame(FrameType.DATA, 1, 0, 0, bytes(MAX_PAYLOAD + 1)))
    assert MAX_PAYLOAD + HEADER_SIZE == MAX_DATAGRAM


def test_bad_magic():
    data = bytearray(encode_frame(Frame(FrameType.DATA, 1, 0, 0, b"x")))
    data[0:2] = b"\x00\x00"
    with pytest.raises(BadMagicError):
        decode_frame(bytes(data))


def test_bad_version():
    data = bytearray(encode_frame(Frame(FrameType.PING, 0, 0, 0)))
    data[2] = 2
    with pytest.raises(BadVersionError):
        decode_frame(bytes(data))


def test_unknown_frame_type():
    data = bytearray(encode_frame(Frame(FrameType.PING, 0, 0, 0)))
    data[3] = 0x08
    with pytest.raises(UnknownFrameTypeError):
        decode_frame(bytes(data))
    with pytest.raises(UnknownFrameTypeError):
        encode_frame(Frame(0x09, 0, 0, 0))


def test_truncated_payload():
    header = frame_bytes(1, 1, 0, 0, bytes(100))[:HEADER_SIZE]
    with pytest.raises(TruncatedError):
        decode_frame(header + bytes(50))


def test_encoding_matches_field_by_field_oracle():
    f = Frame(FrameType.ACK, 0x0102, 0xDEADBEEF, 0x0123456789ABCDEF, b"\x01\x02")
    assert encode_frame(f) == frame_bytes(2, 0x0102, 0xDEADBEEF, 0x0123456789ABCDEF, b"\x01\x02")


@settings(max_examples=1000)
@given(frames)
def test_frame_round_trip(f):
    data = encode_frame(f)
    assert data == frame_bytes(f.frame_type, f.channel_id, f.seq, f.timestamp_us, f.payload)
    assert decode_frame(data) == f


@settings(max_examples=300)
@given(frames, st.data())
def test_truncated_inputs_raise_wire_errors(f, data):
    encoded = encode_frame(f)
    cut = data.draw(st.integers(0, len(encoded) - 1))
    with pytest.raises(WireError):
        decode_frame(encoded[:cut])


@settings(max_examples=1000)
@given(st.binary(max_size=200))
def test_arbitrary_bytes_never_crash_decoders(blob):
    for fn in (decode_frame, split_datagram, decode_media, decode_pose, decode_signal):
        try:
            fn(blob)
        except WireError:
            pass


@given(st.lists(frames.filter(lambda f: len(f.payload) < 300), min_size=1, max_size=12))
def test_bundling_preserves_frames_and_budget(fs):
    encoded = [encode_frame(f) for f in fs]
    dgrams = bundle_frames(encoded)
    assert all(len(d) <= MAX_DATAGRAM for d in dgrams)
    assert [g for d in dgrams for g in split_datagram(d)] == fs


# -- poses --------------------------------------------------------------------


def test_identity_pose_is_117_bytes_and_round_trips():
    pose = AvatarPose.identity()
    payload = encode_pose(pose, 1)
    assert len(payload) == 117
    oracle = pose_bytes(1, {b: ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0)) for b in range(4)})
    assert payload == oracle
    avatar, back = decode_pose(payload)
    assert avatar == 1 and back.node_flags == 0x0F
    assert encode_pose(back, 1) == payload
    for n in Node:
        assert back.nodes[n] == NodeSample((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0))


def test_head_only_pose_is_33_bytes():
    pose = AvatarPose({Node.HEAD: NodeSample((0.0, 1.6, 0.0))})
    assert pose.node_flags == 0x02
    assert len(encode_pose(pose, 3)) == 33


@pytest.mark.parametrize("k", range(5))
def test_encoded_size_formula(k):
    flags = (1 << k) - 1
    assert pose_payload_size(flags) == 5 + 28 * k
    if k:
        pose = AvatarPose({Node(i): NodeSample((1.0, 2.0, 3.0)) for i in range(k)})
        payload = encode_pose(pose, 9)
        assert len(encode_frame(Frame(FrameType.DATA, 1, 0, 0, payload))) == 20 + 5 + 28 * k


def test_media_frame_size():
    m = encode_media(MediaPayload(5, 0, bytes(115)))
    assert len(m) == 120
    assert len(encode_frame(Frame(FrameType.DATA, 2, 0, 0, m))) == 140
    assert decode_media(m) == MediaPayload(5, 0, bytes(115))


def test_ack_frame_size():
    assert len(encode_frame(Frame(FrameType.ACK, 1, 4, 0))) == 20


def test_non_unit_quaternion_rejected():
    raw = pose_bytes(1, {0: ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 2.0))})
    with pytest.raises(PayloadError):
        decode_pose(raw)
    sample = NodeSample((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 2.0))
    pose = AvatarPose.trusted({Node.BODY: sample}, 1, 0, 0)
    with pytest.raises(PayloadError):
        encode_pose(pose, 1)


def test_near_unit_quaternion_renormalized():
    q = (0.0, 0.0, 0.0, 1.0005)
    pose = AvatarPose.trusted({Node.BODY: NodeSample((0.0, 0.0, 0.0), q)}, 1, 0, 0)
    _, back = decode_pose(encode_pose(pose, 1))
    assert math.isclose(math.hypot(*back.nodes[Node.BODY].rotation), 1.0, abs_tol=1e-7)


def test_flag_length_mismatch():
    payload = encode_pose(AvatarPose.identity(), 1)
    with pytest.raises(PayloadError):
        decode_pose(payload[:-1])
    bad = bytearray(payload)
    bad[4] = 0x07
    with pytest.raises(PayloadError):
        decode_pose(bytes(bad))
    bad[4] = 0x1F
    with pytest.raises(PayloadError):
        decode_pose(bytes(bad))


@settings(max_examples=1000)
@given(poses(), st.integers(0, 2**32 - 1))
def test_pose_round_trip(pose, avatar_id):
    payload = encode_pose(pose, avatar_id)
    assert len(payload) == pose_payload_size(pose.node_flags)
    got_id, back = decode_pose(payload, pose.timestamp_us, pose.seq)
    assert got_id == avatar_id
    assert back.node_flags == pose.node_flags
    assert back.timestamp_us == pose.timestamp_us and back.seq == pose.seq
    for node, sample in pose.nodes.items():
        out = back.nodes[node]
        # coordinates survive bit-exactly at binary32 precision
        assert out.position == tuple(_f32(v) for v in sample.position)
        assert abs(math.sqrt(sum(c * c for c in out.rotation)) - 1.0) <= 1e-3
        for a, b in zip(out.rotation, sample.rotation):
            assert abs(a - b) < 1e-6


# -- stream records -------------------------------------------------------------


@given(st.lists(st.binary(max_size=300), max_size=10), st.integers(1, 50))
def test_stream_decoder_reassembles_any_chunking(records, chunk):
    stream = b"".join(encode_stream_record(r) for r in records)
    dec = StreamDecoder()
    out = []
    for i in range(0, len(stream), chunk):
        out.extend(dec.feed(stream[i:i + chunk]))
    assert out == records


def test_stream_decoder_rejects_huge_record():
    dec = StreamDecoder(max_record=100)
    with pytest.raises(OversizeError):
        dec.feed(struct.pack(">I", 101))


# -- signaling ------------------------------------------------------------------


def test_join_round_trip():
    msg = signal("join", room_id="r1", client_id="c1", condition="delegated")
    assert decode_signal(encode_signal(msg)) == msg


def test_field_order_not_significant():
    a = decode_signal('{"type":"join","room_id":"r1","client_id":"c1","condition":"baseline"}')
    b = decode_signal('{"condition":"baseline","client_id":"c1","room_id":"r1","type":"join"}')
    assert a == b


def test_missing_type():
    with pytest.raises(SignalError):
        decode_signal("{}")


def test_unknown_type():
    with pytest.raises(SignalError):
        decode_signal(json.dumps({"type": "dance"}))


def test_missing_required_field():
    with pytest.raises(SignalError):
        decode_signal(json.dumps({"type": "join", "room_id": "r1"}))


@pytest.mark.parametrize("text", ["", "not json", "[1, 2]", '{"type": 5}', b"\xff\xfe"])
def test_malformed_signal_text(text):
    with pytest.raises(SignalError):
        decode_signal(text)


@settings(max_examples=1000)
@given(signals())
def test_signal_round_trip(msg):
    assert decode_signal(encode_signal(msg)) == msg
