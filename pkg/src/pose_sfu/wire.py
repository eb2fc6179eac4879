"""Binary datagram frames, pose/media payloads and JSON signaling messages.

Frame layout (big-endian, 20-byte header)::

    0      2    3      4          6        10              18        20
    +------+----+------+----------+--------+---------------+---------+---------
    |magic |ver |type  |channel_id|  seq   | timestamp_us  | pay_len | payload
    |0x4D56| 1  | u8   |   u16    |  u32   |     u64       |   u16   |
    +------+----+------+----------+--------+---------------+---------+---------

One UDP datagram may carry several frames back to back (each is
self-delimiting through ``payload_len``); see ``split_datagram`` and
``bundle_frames``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Iterable, Iterator, NamedTuple

from .pose import AvatarPose, Node, NodeSample, QUAT_NORM_TOLERANCE

MAGIC = 0x4D56
VERSION = 1
HEADER = struct.Struct(">HBBHIQH")
HEADER_SIZE = HEADER.size  # 20
MAX_DATAGRAM = 1400
MAX_PAYLOAD = MAX_DATAGRAM - HEADER_SIZE

POSE_HEADER = struct.Struct(">IB")
NODE_SIZE = 28
# four binary32 components carry about 2**-23 relative error each
F32_NORM_SLACK = 4e-7
NODE_FMT = "3f4f"
MEDIA_HEADER = struct.Struct(">IB")
STREAM_PREFIX = struct.Struct(">I")

_MAGIC_VERSION = MAGIC.to_bytes(2, "big") + bytes([VERSION])


class FrameType(IntEnum):
    DATA = 0x01
    ACK = 0x02
    PING = 0x03
    PONG = 0x04
    SIGNAL = 0x05
    CLOSE = 0x06
    BIND = 0x07


_FRAME_TYPES = frozenset(int(t) for t in FrameType)


class WireError(ValueError):
    """Base class for everything the codecs reject."""


class OversizeError(WireError):
    pass


class BadMagicError(WireError):
    pass


class BadVersionError(WireError):
    pass


class TruncatedError(WireError):
    pass


class UnknownFrameTypeError(WireError):
    pass


class PayloadError(WireError):
    """Pose or media payload does not match its declared layout."""


class SignalError(WireError):
    """Malformed signaling text, unknown message type, or missing field."""


class Frame(NamedTuple):
    """One decoded frame. A named tuple rather than a dataclass: it is built
    once per frame on every receive path, so construction cost matters."""

    frame_type: int
    channel_id: int
    seq: int
    timestamp_us: int
    payload: bytes = b""


def encode_frame(frame: Frame, max_payload: int = MAX_PAYLOAD) -> bytes:
    n = len(frame.payload)
    if n > max_payload or n > 0xFFFF:
        raise OversizeError(f"payload of {n} bytes exceeds budget of {max_payload}")
    if frame.frame_type not in _FRAME_TYPES:
        raise UnknownFrameTypeError(f"frame type {frame.frame_type:#x}")
    return (
        HEADER.pack(MAGIC, VERSION, frame.frame_type, frame.channel_id, frame.seq, frame.timestamp_us, n)
        + frame.payload
    )


def _decode_at(data: bytes, offset: int) -> tuple[Frame, int]:
    end = offset + HEADER_SIZE
    if len(data) < end:
        raise TruncatedError(f"need {HEADER_SIZE} header bytes, have {len(data) - offset}")
    magic, version, ftype, channel, seq, ts, plen = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise BadMagicError(f"magic {magic:#06x}")
    if version != VERSION:
        raise BadVersionError(f"version {version}")
    if ftype not in _FRAME_TYPES:
        raise UnknownFrameTypeError(f"frame type {ftype:#x}")
    stop = end + plen
    if len(data) < stop:
        raise TruncatedError(f"payload_len {plen} but only {len(data) - end} bytes follow")
    return Frame(ftype, channel, seq, ts, bytes(data[end:stop])), stop


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame; trailing bytes are an error."""
    frame, stop = _decode_at(data, 0)
    if stop != len(data):
        raise TruncatedError(f"{len(data) - stop} trailing bytes after frame")
    return frame


def iter_frames(data: bytes) -> Iterator[Frame]:
    offset = 0
    n = len(data)
    while offset < n:
        frame, offset = _decode_at(data, offset)
        yield frame


def split_datagram(data: bytes) -> list[Frame]:
    """Decode every frame of a bundled datagram. Any malformed frame rejects the lot."""
    return list(iter_frames(data))


def bundle_frames(frames: Iterable[bytes], budget: int = MAX_DATAGRAM) -> list[bytes]:
    """Pack encoded frames into as few datagrams of at most ``budget`` bytes as possible,
    preserving order."""
    if not isinstance(frames, list):
        frames = list(frames)
    if sum(map(len, frames)) <= budget:
        return [b"".join(frames)] if frames else []
    out: list[bytes] = []
    cur: list[bytes] = []
    size = 0
    for f in frames:
        if size + len(f) > budget and cur:
            out.append(b"".join(cur))
            cur = []
            size = 0
        cur.append(f)
        size += len(f)
    if cur:
        out.append(b"".join(cur))
    return out


# -- pose payload -----------------------------------------------------------

_NODE_STRUCTS = {k: struct.Struct(">" + NODE_FMT * k) for k in range(5)}
_POPCOUNT = [bin(i).count("1") for i in range(16)]
_NODE_BITS = tuple((node, node.flag) for node in Node)


def pose_payload_size(node_flags: int) -> int:
    return POSE_HEADER.size + NODE_SIZE * _POPCOUNT[node_flags & 0x0F]


def encode_pose(pose: AvatarPose, avatar_id: int) -> bytes:
    flags = 0
    values: list[float] = []
    for node in Node:
        sample = pose.nodes.get(node)
        if sample is None:
            continue
        flags |= node.flag
        q = sample.rotation
        norm = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
        if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
            raise PayloadError(f"{node.name} quaternion norm {norm:.6f}")
        if abs(norm - 1.0) > F32_NORM_SLACK:
            q = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm)
        values.extend(sample.position)
        values.extend(q)
    k = _POPCOUNT[flags]
    return POSE_HEADER.pack(avatar_id, flags) + _NODE_STRUCTS[k].pack(*values)


def peek_pose_header(payload: bytes) -> tuple[int, int]:
    """(avatar_id, node_flags) without decoding node data."""
    if len(payload) < POSE_HEADER.size:
        raise PayloadError("pose payload shorter than its header")
    return POSE_HEADER.unpack_from(payload)


def decode_pose(payload: bytes, timestamp_us: int = 0, seq: int = 0) -> tuple[int, AvatarPose]:
    """Inverse of ``encode_pose``. Quaternions further than binary32 rounding
    from unit length come back renormalized.

    The wire payload carries no time of its own; callers pass the enclosing
    frame's ``timestamp_us`` and ``seq``.
    """
    avatar_id, flags = peek_pose_header(payload)
    if flags & 0xF0:
        raise PayloadError(f"reserved node flag bits set: {flags:#04x}")
    k = _POPCOUNT[flags]
    if len(payload) != POSE_HEADER.size + NODE_SIZE * k:
        raise PayloadError(f"flags {flags:#04x} imply {k} nodes but payload is {len(payload)} bytes")
    if k == 0:
        raise PayloadError("pose carries no nodes")
    vals = _NODE_STRUCTS[k].unpack_from(payload, POSE_HEADER.size)
    nodes = {}
    i = 0
    for node, bit in _NODE_BITS:
        if flags & bit:
            px, py, pz, qx, qy, qz, qw = vals[i:i + 7]
            i += 7
            norm = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
            if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
                raise PayloadError(f"{node.name} quaternion norm {norm:.6f}")
            # within binary32 rounding of unit length: keep the wire values
            # so decode/encode is bit-exact
            if abs(norm - 1.0) > F32_NORM_SLACK:
                qx, qy, qz, qw = qx / norm, qy / norm, qz / norm, qw / norm
            nodes[node] = NodeSample((px, py, pz), (qx, qy, qz, qw))
    pose = AvatarPose.trusted(nodes, flags, timestamp_us, seq)
    return avatar_id, pose


# -- media payload ----------------------------------------------------------

AUDIO = 0
VIDEO = 1


@dataclass(frozen=True)
class MediaPayload:
    source_id: int
    kind: int
    data: bytes = b""


def encode_media(media: MediaPayload) -> bytes:
    if media.kind not in (AUDIO, VIDEO):
        raise PayloadError(f"media kind {media.kind}")
    return MEDIA_HEADER.pack(media.source_id, media.kind) + media.data


def decode_media(payload: bytes) -> MediaPayload:
    if len(payload) < MEDIA_HEADER.size:
        raise PayloadError("media payload shorter than its header")
    source_id, kind = MEDIA_HEADER.unpack_from(payload)
    if kind not in (AUDIO, VIDEO):
        raise PayloadError(f"media kind {kind}")
    return MediaPayload(source_id, kind, bytes(payload[MEDIA_HEADER.size:]))


# -- stream framing (baseline relay) ----------------------------------------

def encode_stream_record(frame_bytes: bytes) -> bytes:
    return STREAM_PREFIX.pack(len(frame_bytes)) + frame_bytes


class StreamDecoder:
    """Reassemble 4-byte-length-prefixed records from a byte stream."""

    def __init__(self, max_record: int = 1 << 20):
        self._buf = bytearray()
        self.max_record = max_record

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= 4:
            (n,) = STREAM_PREFIX.unpack_from(buf, pos)
            if n > self.max_record:
                raise OversizeError(f"stream record of {n} bytes")
            if len(buf) - pos - 4 < n:
                break
            out.append(bytes(buf[pos + 4:pos + 4 + n]))
            pos += 4 + n
        if pos:
            del buf[:pos]
        return out


# -- signaling --------------------------------------------------------------

SIGNAL_FIELDS: dict[str, tuple[str, ...]] = {
    "join": ("room_id", "client_id", "condition"),
    "accept": ("udp_host", "udp_port", "token", "channels"),
    "bind_ok": (),
    "switch": (),
    "switch_ok": (),
    "publish": ("channels",),
    "peer_joined": ("client_id",),
    "peer_left": ("client_id",),
    "leave": (),
    "error": ("code", "message"),
}


@dataclass(frozen=True)
class SignalMessage:
    type: str
    fields: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        required = SIGNAL_FIELDS.get(self.type)
        if required is None:
            raise SignalError(f"unknown signal type {self.type!r}")
        missing = [f for f in required if f not in self.fields]
        if missing:
            raise SignalError(f"{self.type} missing field(s): {', '.join(missing)}")
        if "type" in self.fields:
            raise SignalError("'type' is reserved")

    def __getitem__(self, key: str) -> Any:
        return self.fields[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.fields.get(key, default)


def signal(type_: str, **fields: Any) -> SignalMessage:
    return SignalMessage(type_, fields)


def encode_signal(msg: SignalMessage) -> str:
    return json.dumps({"type": msg.type, **msg.fields}, sort_keys=True, separators=(",", ":"))


def decode_signal(text: str | bytes) -> SignalMessage:
    try:
        obj = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SignalError(f"malformed signal text: {exc}") from exc
    if not isinstance(obj, dict):
        raise SignalError("signal must be a JSON object")
    if "type" not in obj:
        raise SignalError("signal missing 'type'")
    type_ = obj.pop("type")
    if not isinstance(type_, str):
        raise SignalError("signal 'type' must be a string")
    return SignalMessage(type_, obj)
