"""DataChannel-like channels over UDP datagrams.

Everything here is sans-IO: callers feed received bytes and the current time
(milliseconds, any monotonic origin) and get back deliveries and bytes to put
on the wire. The asyncio and simulated-network drivers own the sockets.

Reliability modes follow the SCTP partial-reliability family:

====  ====================  ==============================================
mode  name                  behaviour
====  ====================  ==============================================
0     reliable-ordered      retransmit until acked, deliver in seq order
1     reliable-unordered    retransmit until acked, deliver on arrival
2     partial-retransmit    give up after ``max_retransmits`` retries
3     partial-timed         give up ``max_lifetime_ms`` after first send
4     unreliable            send once, never acked
====  ====================  ==============================================

Reliable channels (modes 0 and 1) keep at most ``send_window`` frames in
flight past the oldest unacked one; later sends wait in a pacing queue until
acks open the window. The window defaults to the receiver's reorder cap, so a
sender never transmits frames the receiver would have to discard.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any

from .wire import (
    HEADER,
    MAGIC,
    MAX_DATAGRAM,
    MAX_PAYLOAD,
    VERSION,
    Frame,
    FrameType,
    OversizeError,
    WireError,
    bundle_frames,
    iter_frames,
)

RTO_INITIAL_MS = 200.0
RTO_MAX_MS = 1600.0
DUP_WINDOW = 4096
REORDER_CAP = 1024

_DATA = int(FrameType.DATA)
_SIGNAL = int(FrameType.SIGNAL)
_ACK = int(FrameType.ACK)
_SEQUENCED = frozenset((_DATA, _SIGNAL))


class Mode(IntEnum):
    RELIABLE_ORDERED = 0
    RELIABLE_UNORDERED = 1
    PARTIAL_RETRANSMIT = 2
    PARTIAL_TIMED = 3
    UNRELIABLE = 4

    @property
    def acked(self) -> bool:
        return self is not Mode.UNRELIABLE

    @property
    def reliable(self) -> bool:
        return self in (Mode.RELIABLE_ORDERED, Mode.RELIABLE_UNORDERED)


class TransportError(Exception):
    pass


class ChannelConfigError(TransportError, ValueError):
    pass


class DuplicateChannelError(TransportError):
    pass


class ChannelClosedError(TransportError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    channel_id: int
    mode: Mode
    max_retransmits: int | None = None
    max_lifetime_ms: float | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.channel_id <= 0xFFFF:
            raise ChannelConfigError(f"channel_id {self.channel_id} out of u16 range")
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError:
            raise ChannelConfigError(f"unknown mode {self.mode!r}") from None
        if self.mode is Mode.PARTIAL_RETRANSMIT:
            if self.max_retransmits is None or self.max_retransmits < 0:
                raise ChannelConfigError("partial-retransmit channel needs max_retransmits >= 0")
        if self.mode is Mode.PARTIAL_TIMED:
            if self.max_lifetime_ms is None or self.max_lifetime_ms <= 0:
                raise ChannelConfigError("partial-timed channel needs max_lifetime_ms > 0")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"mode": int(self.mode)}
        if self.max_retransmits is not None:
            d["max_retransmits"] = self.max_retransmits
        if self.max_lifetime_ms is not None:
            d["max_lifetime_ms"] = self.max_lifetime_ms
        return d

    @classmethod
    def from_dict(cls, channel_id: int, d: dict[str, Any]) -> "ChannelConfig":
        return cls(int(channel_id), d["mode"], d.get("max_retransmits"), d.get("max_lifetime_ms"))


SIGNAL_CHANNEL = 0
TRANSFORM_CHANNEL = 1
AUDIO_CHANNEL = 2
VIDEO_CHANNEL = 3

DEFAULT_CHANNEL_TABLE: tuple[ChannelConfig, ...] = (
    ChannelConfig(SIGNAL_CHANNEL, Mode.RELIABLE_ORDERED),
    ChannelConfig(TRANSFORM_CHANNEL, Mode.RELIABLE_ORDERED),
    ChannelConfig(AUDIO_CHANNEL, Mode.UNRELIABLE),
    ChannelConfig(VIDEO_CHANNEL, Mode.PARTIAL_RETRANSMIT, max_retransmits=1),
)


def channel_table_to_wire(table) -> dict[str, dict[str, Any]]:
    return {str(c.channel_id): c.to_dict() for c in table}


def channel_table_from_wire(obj: dict[str, Any]) -> tuple[ChannelConfig, ...]:
    return tuple(sorted((ChannelConfig.from_dict(k, v) for k, v in obj.items()), key=lambda c: c.channel_id))


class _Pending:
    __slots__ = ("frame", "first_sent", "tx_count", "rto", "deadline", "expires")

    def __init__(self, frame: bytes, now: float, rto: float, expires: float | None):
        self.frame = frame
        self.first_sent = now
        self.tx_count = 1
        self.rto = rto
        self.deadline = now + rto
        self.expires = expires


class Channel:
    __slots__ = (
        "config", "channel_id", "mode", "closed", "next_seq", "unacked",
        "floor", "reorder", "seen", "high", "base", "pacing",
    )

    def __init__(self, config: ChannelConfig):
        self.config = config
        self.channel_id = config.channel_id
        self.mode = int(config.mode)
        self.closed = False
        self.next_seq = 0
        self.unacked: dict[int, _Pending] = {}
        self.base = 0  # reliable modes: lowest seq possibly unacked
        self.pacing: deque[tuple[int, bytes]] = deque()  # reliable modes: (seq, frame) awaiting window
        # receive side
        self.floor = 0  # modes 0/1: lowest seq not yet delivered
        self.reorder: dict[int, Frame] = {}  # mode 0 only
        self.seen: set[int] = set()
        self.high = -1  # modes 2-4: highest seq seen


_COUNTERS = (
    "frames_sent", "retransmits", "acks_sent", "acks_received", "abandoned",
    "delivered", "duplicates", "decode_errors", "unknown_channel",
    "reorder_overflow", "window_drops", "closed_unacked", "paced",
)


class ChannelSet:
    """All channels of one session, plus their send and receive state."""

    def __init__(
        self,
        configs=(),
        *,
        epoch_ms: float = 0.0,
        rto_initial_ms: float = RTO_INITIAL_MS,
        rto_max_ms: float = RTO_MAX_MS,
        dup_window: int = DUP_WINDOW,
        reorder_cap: int = REORDER_CAP,
        max_payload: int = MAX_PAYLOAD,
        send_window: int | None = None,
    ):
        self.epoch_ms = epoch_ms
        self.rto_initial_ms = rto_initial_ms
        self.rto_max_ms = rto_max_ms
        self.dup_window = dup_window
        self.reorder_cap = reorder_cap
        self.max_payload = max_payload
        self.send_window = reorder_cap if send_window is None else send_window
        self.channels: dict[int, Channel] = {}
        self.outbox: list[bytes] = []
        self.closed = False
        self._timers: list[tuple[float, int, int]] = []
        self.counters: dict[str, int] = dict.fromkeys(_COUNTERS, 0)
        for c in configs:
            self.open_channel(c)

    # -- setup ----------------------------------------------------------

    def open_channel(self, config: ChannelConfig) -> Channel:
        if self.closed:
            raise ChannelClosedError("channel set is closed")
        if config.channel_id in self.channels:
            raise DuplicateChannelError(f"channel {config.channel_id} already open")
        ch = Channel(config)
        self.channels[config.channel_id] = ch
        return ch

    def close_channel(self, channel_id: int) -> None:
        ch = self.channels[channel_id]
        ch.closed = True
        self.counters["closed_unacked"] += len(ch.unacked) + len(ch.pacing)
        ch.unacked.clear()
        ch.pacing.clear()

    def close(self) -> None:
        for cid in self.channels:
            self.close_channel(cid)
        self.closed = True
        self.outbox.clear()
        self._timers.clear()

    # -- send path ------------------------------------------------------

    def send(
        self,
        channel_id: int,
        payload: bytes,
        now: float,
        *,
        timestamp_us: int | None = None,
        frame_type: int = _DATA,
    ) -> int:
        ch = self.channels.get(channel_id)
        if ch is None or ch.closed:
            raise ChannelClosedError(f"channel {channel_id} is not open")
        n = len(payload)
        if n > self.max_payload:
            raise OversizeError(f"payload of {n} bytes exceeds budget of {self.max_payload}")
        seq = ch.next_seq
        ch.next_seq = seq + 1
        if timestamp_us is None:
            timestamp_us = int((now - self.epoch_ms) * 1000.0)
        frame = HEADER.pack(MAGIC, VERSION, frame_type, channel_id, seq, timestamp_us, n) + payload
        mode = ch.mode
        if mode < 2 and (ch.pacing or not self._window_has_room(ch, seq)):
            ch.pacing.append((seq, frame))
            self.counters["paced"] += 1
            return seq
        self._transmit(ch, seq, frame, now)
        return seq

    def _transmit(self, ch: Channel, seq: int, frame: bytes, now: float) -> None:
        self.outbox.append(frame)
        self.counters["frames_sent"] += 1
        mode = ch.mode
        if mode != 4:
            expires = None
            if mode == 3:
                expires = now + ch.config.max_lifetime_ms
                heapq.heappush(self._timers, (expires, ch.channel_id, seq))
            rec = _Pending(frame, now, self.rto_initial_ms, expires)
            ch.unacked[seq] = rec
            heapq.heappush(self._timers, (rec.deadline, ch.channel_id, seq))

    def _window_has_room(self, ch: Channel, seq: int) -> bool:
        unacked = ch.unacked
        base = ch.base
        while base < seq and base not in unacked:
            base += 1
        ch.base = base
        return seq - base < self.send_window

    def _release(self, ch: Channel, now: float) -> None:
        pacing = ch.pacing
        while pacing and self._window_has_room(ch, pacing[0][0]):
            seq, frame = pacing.popleft()
            self._transmit(ch, seq, frame, now)

    def window_open(self, channel_id: int) -> bool:
        """False while a reliable channel has frames waiting for acks to open
        its send window (further sends would only queue behind them)."""
        ch = self.channels.get(channel_id)
        return ch is None or ch.mode >= 2 or not ch.pacing

    def send_control(
        self, frame_type: int, now: float, *, channel_id: int = 0, seq: int = 0, payload: bytes = b""
    ) -> bytes:
        """Queue an unsequenced frame (PING, PONG, CLOSE, BIND). Never retransmitted."""
        ts = int((now - self.epoch_ms) * 1000.0)
        frame = HEADER.pack(MAGIC, VERSION, frame_type, channel_id, seq, ts, len(payload)) + payload
        self.outbox.append(frame)
        return frame

    def retransmit_tick(self, now: float) -> list[bytes]:
        out: list[bytes] = []
        timers = self._timers
        channels = self.channels
        while timers and timers[0][0] <= now:
            deadline, cid, seq = heapq.heappop(timers)
            ch = channels.get(cid)
            if ch is None:
                continue
            rec = ch.unacked.get(seq)
            if rec is None:
                continue
            mode = ch.mode
            if mode == 3 and now >= rec.expires:
                del ch.unacked[seq]
                self.counters["abandoned"] += 1
                continue
            if deadline != rec.deadline:
                continue
            if mode == 2 and rec.tx_count > ch.config.max_retransmits:
                del ch.unacked[seq]
                self.counters["abandoned"] += 1
                continue
            rec.tx_count += 1
            rec.rto = min(rec.rto * 2.0, self.rto_max_ms)
            rec.deadline = now + rec.rto
            heapq.heappush(timers, (rec.deadline, cid, seq))
            out.append(rec.frame)
            self.counters["retransmits"] += 1
        return out

    def next_deadline(self) -> float | None:
        return self._timers[0][0] if self._timers else None

    def unacked_count(self) -> int:
        return sum(len(ch.unacked) + len(ch.pacing) for ch in self.channels.values())

    # -- receive path ---------------------------------------------------

    def on_datagram_in(self, data: bytes, now: float) -> tuple[list[Frame], list[bytes]]:
        """Process one received datagram.

        Returns ``(deliveries, acks)``. Deliveries are DATA/SIGNAL frames released
        to the application plus any PING/PONG/CLOSE/BIND control frames; ACK
        frames are consumed here. Undecodable input is counted and dropped.
        """
        deliveries: list[Frame] = []
        acks: list[bytes] = []
        try:
            frames = list(iter_frames(data))
        except WireError:
            self.counters["decode_errors"] += 1
            return deliveries, acks
        for f in frames:
            ftype = f.frame_type
            if ftype == _ACK:
                ch = self.channels.get(f.channel_id)
                if ch is not None and ch.unacked.pop(f.seq, None) is not None:
                    self.counters["acks_received"] += 1
                    if ch.pacing:
                        self._release(ch, now)
            elif ftype in _SEQUENCED:
                self._receive(f, deliveries, acks)
            else:
                deliveries.append(f)
        return deliveries, acks

    def _receive(self, f: Frame, deliveries: list[Frame], acks: list[bytes]) -> None:
        ch = self.channels.get(f.channel_id)
        counters = self.counters
        if ch is None or ch.closed:
            counters["unknown_channel"] += 1
            return
        seq = f.seq
        mode = ch.mode
        if mode == 0:
            if seq == ch.floor:
                deliveries.append(f)
                nxt = seq + 1
                reorder = ch.reorder
                if reorder:
                    while nxt in reorder:
                        deliveries.append(reorder.pop(nxt))
                        nxt += 1
                counters["delivered"] += nxt - seq
                ch.floor = nxt
            elif seq < ch.floor or seq in ch.reorder:
                counters["duplicates"] += 1
            elif seq - ch.floor >= self.reorder_cap or len(ch.reorder) >= self.reorder_cap:
                counters["reorder_overflow"] += 1
                return
            else:
                ch.reorder[seq] = f
        elif mode == 1:
            if seq < ch.floor or seq in ch.seen:
                counters["duplicates"] += 1
            elif seq - ch.floor >= self.dup_window:
                counters["window_drops"] += 1
                return
            else:
                deliveries.append(f)
                counters["delivered"] += 1
                if seq == ch.floor:
                    nxt = seq + 1
                    seen = ch.seen
                    while nxt in seen:
                        seen.discard(nxt)
                        nxt += 1
                    ch.floor = nxt
                else:
                    ch.seen.add(seq)
        else:
            if seq + self.dup_window <= ch.high:
                counters["window_drops"] += 1
            elif seq in ch.seen:
                counters["duplicates"] += 1
            else:
                deliveries.append(f)
                counters["delivered"] += 1
                seen = ch.seen
                seen.add(seq)
                if seq > ch.high:
                    ch.high = seq
                    if len(seen) > 2 * self.dup_window:
                        cutoff = seq - self.dup_window
                        ch.seen = {s for s in seen if s > cutoff}
            if mode == 4:
                return
        acks.append(HEADER.pack(MAGIC, VERSION, _ACK, f.channel_id, seq, f.timestamp_us, 0))
        counters["acks_sent"] += 1

    # -- output ---------------------------------------------------------

    def take_outbox(self) -> list[bytes]:
        out = self.outbox
        self.outbox = []
        return out

    def drain(self, now: float, extra: list[bytes] | None = None, budget: int = MAX_DATAGRAM) -> list[bytes]:
        """Everything due on the wire right now, bundled into datagrams:
        ``extra`` (typically acks) first, then retransmits, then new frames."""
        frames = list(extra) if extra else []
        frames.extend(self.retransmit_tick(now))
        if self.outbox:
            frames.extend(self.outbox)
            self.outbox = []
        if not frames:
            return []
        return bundle_frames(frames, budget)

    def stats(self) -> dict[str, int]:
        snap = dict(self.counters)
        snap["unacked"] = self.unacked_count()
        return snap


# -- network emulation ------------------------------------------------------


@dataclass
class EmulatedLink:
    """Seeded loss/latency/jitter model for one direction of a path.

    Every call to ``apply_emulation`` draws exactly two numbers from the
    link's generator, so decision ``i`` depends only on (seed, i).
    """

    loss_probability: float = 0.0
    base_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0
    invocations: int = field(default=0, init=False)
    dropped: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError(f"loss_probability {self.loss_probability} not in [0, 1]")
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        self._rng = random.Random(self.seed)

    def reset(self) -> None:
        self._rng = random.Random(self.seed)
        self.invocations = 0
        self.dropped = 0


def apply_emulation(link: EmulatedLink, frame: bytes | None, now: float) -> float | None:
    """Delivery time for ``frame`` sent at ``now``, or None when the link drops it."""
    r_loss = link._rng.random()
    r_jitter = link._rng.random()
    link.invocations += 1
    if r_loss < link.loss_probability:
        link.dropped += 1
        return None
    return now + link.base_latency_ms + r_jitter * link.jitter_ms
