"""Independent reference implementations used by the tests.

Each oracle is written from the contract, not from the package code, so the
package and the oracle can disagree.
"""

from __future__ import annotations

import math
import struct
from collections import Counter


# -- wire ---------------------------------------------------------------------


def frame_bytes(frame_type: int, channel_id: int, seq: int, ts_us: int, payload: bytes) -> bytes:
    """Header assembled field by field with int.to_bytes (no struct format)."""
    return (
        (0x4D56).to_bytes(2, "big")
        + bytes([1, frame_type])
        + channel_id.to_bytes(2, "big")
        + seq.to_bytes(4, "big")
        + ts_us.to_bytes(8, "big")
        + len(payload).to_bytes(2, "big")
        + payload
    )


def pose_bytes(avatar_id: int, nodes: dict[int, tuple[tuple[float, ...], tuple[float, ...]]]) -> bytes:
    """nodes: bit index -> (position, quaternion); emitted in bit order."""
    flags = 0
    body = b""
    for bit in sorted(nodes):
        flags |= 1 << bit
        pos, quat = nodes[bit]
        for v in (*pos, *quat):
            body += struct.pack(">f", v)
    return avatar_id.to_bytes(4, "big") + bytes([flags]) + body


# -- transport ----------------------------------------------------------------


def transmit_times(mode: int, sent_at: float, horizon: float, *, max_retransmits: int | None = None,
                   lifetime: float | None = None, rto0: float = 200.0, cap: float = 1600.0) -> list[float]:
    """Times at which one never-acked frame is put on the wire, for a driver
    that ticks exactly at every retransmit deadline."""
    times = [sent_at]
    if mode == 4:
        return times
    rto = rto0
    t = sent_at
    while True:
        t = t + rto
        if t > horizon:
            return times
        if mode == 3 and t >= sent_at + lifetime:
            return times
        if mode == 2 and len(times) > max_retransmits:
            return times
        times.append(t)
        rto = min(rto * 2, cap)


# -- forwarding ---------------------------------------------------------------


def fanout_oracle(events: list[tuple], capacity: int | None = None) -> Counter:
    """Brute-force delivery multiset for a join/leave/publish trace.

    events: ("join", c) | ("leave", c) | ("publish", c, channel, seq).
    Joins beyond ``capacity`` are refused. Returns Counter of
    (sender, channel, seq, receiver).
    """
    members: set[str] = set()
    out: Counter = Counter()
    for ev in events:
        if ev[0] == "join":
            if capacity is None or len(members) < capacity:
                members.add(ev[1])
        elif ev[0] == "leave":
            members.discard(ev[1])
        else:
            _, sender, channel, seq = ev
            if sender not in members:
                continue
            for r in sorted(members):
                if r != sender:
                    out[(sender, channel, seq, r)] += 1
    return out


def relay_oracle(conns: list[str], msgs: list[tuple[str, int]]) -> Counter:
    out: Counter = Counter()
    for sender, seq in msgs:
        for r in conns:
            if r != sender:
                out[(sender, r, seq)] += 1
    return out


# -- avatar -------------------------------------------------------------------


def lww_oracle(samples: list[tuple[int, object]]) -> tuple[int, object]:
    """Max-timestamp sample of a (timestamp, value) list."""
    return max(samples, key=lambda s: s[0])


def slerp_closed_form(a: tuple[float, ...], b: tuple[float, ...], u: float) -> tuple[float, ...]:
    dot = sum(x * y for x, y in zip(a, b))
    if dot < 0:
        b = tuple(-x for x in b)
        dot = -dot
    theta = math.acos(min(1.0, dot))
    if theta < 1e-9:
        return a
    s = math.sin(theta)
    wa, wb = math.sin((1 - u) * theta) / s, math.sin(u * theta) / s
    return tuple(wa * x + wb * y for x, y in zip(a, b))
