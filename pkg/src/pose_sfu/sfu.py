"""Room registry and selective forwarding.

The SFU receives each publisher's frame once and queues a copy for every
other member of the room. Queues are drained by whoever owns the sessions
(``signaling.ServerCore``), which re-sequences frames onto each subscriber's
own channels without touching payload bytes.
"""

from __future__ import annotations

import csv
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping

from .transport import DEFAULT_CHANNEL_TABLE
from .wire import Frame, FrameType

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1000
QUEUE_CAP = 1024
EMPTY_ROOM_TTL_MS = 60_000.0
FORWARD_LOG_RING = 65536


class RoomError(Exception):
    code = "room_error"


class RoomExistsError(RoomError):
    code = "room_exists"


class RoomNotFoundError(RoomError):
    code = "unknown_room"


class RoomFullError(RoomError):
    code = "room_full"


class InvalidCapacityError(RoomError, ValueError):
    code = "invalid_capacity"


class MemberExistsError(RoomError):
    code = "duplicate_client"


class Outcome(Enum):
    ENQUEUED = "enqueued"
    DROPPED = "dropped"
    EVICTED = "evicted-session"


@dataclass(slots=True)
class QueuedFrame:
    channel_id: int
    frame_type: int
    seq: int
    timestamp_us: int
    payload: bytes
    ingress_ms: float
    from_client: str


@dataclass(eq=False)
class Participant:
    client_id: str
    session: Any = None
    queue: deque = field(default_factory=deque)
    slow_consumer: bool = False
    evicted: bool = False
    max_depth: int = 0
    dropped: int = 0

    def __hash__(self) -> int:
        return id(self)


@dataclass
class Room:
    room_id: str
    capacity: int = DEFAULT_CAPACITY
    members: dict[str, Participant] = field(default_factory=dict)
    forwarded: dict[int, int] = field(default_factory=dict)
    deliveries: dict[int, int] = field(default_factory=dict)
    empty_since: float | None = None


@dataclass(frozen=True)
class ForwardRecord:
    room_id: str
    from_client: str
    channel_id: int
    seq: int
    recipient_count: int
    t_us: int


FORWARD_LOG_COLUMNS = ("room_id", "from", "channel", "seq", "recipients", "t_us")


class ForwardLog:
    """Bounded in-memory ring of forward records with an optional CSV sink."""

    def __init__(self, maxlen: int = FORWARD_LOG_RING, csv_path: str | None = None):
        self.records: deque[ForwardRecord] = deque(maxlen=maxlen)
        self.total = 0
        self._fh = None
        self._writer = None
        if csv_path:
            self._fh = open(csv_path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(FORWARD_LOG_COLUMNS)

    def append(self, rec: ForwardRecord) -> None:
        self.records.append(rec)
        self.total += 1
        if self._writer is not None:
            self._writer.writerow(
                (rec.room_id, rec.from_client, rec.channel_id, rec.seq, rec.recipient_count, rec.t_us)
            )

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None


class LatencyHistogram:
    """Fixed-resolution histogram (0.1 ms buckets up to 5 s, one overflow bucket)."""

    RESOLUTION_MS = 0.1
    BUCKETS = 50_000

    def __init__(self) -> None:
        self.counts = [0] * (self.BUCKETS + 1)
        self.n = 0
        self.max_ms = 0.0

    def add(self, ms: float) -> None:
        i = int(ms / self.RESOLUTION_MS)
        if i > self.BUCKETS:
            i = self.BUCKETS
        elif i < 0:
            i = 0
        self.counts[i] += 1
        self.n += 1
        if ms > self.max_ms:
            self.max_ms = ms

    def add_many(self, ms: float, k: int) -> None:
        i = min(max(int(ms / self.RESOLUTION_MS), 0), self.BUCKETS)
        self.counts[i] += k
        self.n += k
        if ms > self.max_ms:
            self.max_ms = ms

    def percentile(self, p: float) -> float | None:
        """Upper edge of the bucket holding the p-th percentile (conservative),
        never above the largest observed value."""
        if self.n == 0:
            return None
        target = p / 100.0 * self.n
        acc = 0
        for i, c in enumerate(self.counts):
            acc += c
            if acc >= target and c:
                if i == self.BUCKETS:
                    return self.max_ms
                return min((i + 1) * self.RESOLUTION_MS, self.max_ms)
        return self.max_ms

    def snapshot(self) -> dict[str, Any]:
        return {
            "count": self.n,
            "p50_ms": self.percentile(50),
            "p99_ms": self.percentile(99),
            "max_ms": self.max_ms if self.n else None,
        }


def _default_modes() -> dict[int, int]:
    return {c.channel_id: int(c.mode) for c in DEFAULT_CHANNEL_TABLE}


class SFU:
    """Room registry plus the forwarding plane.

    ``notify(participant, message_type, **fields)`` is called for peer_joined /
    peer_left events and ``on_evict(participant, code)`` when a reliable queue
    overflows; both default to no-ops.
    """

    def __init__(
        self,
        *,
        default_capacity: int = DEFAULT_CAPACITY,
        queue_cap: int = QUEUE_CAP,
        channel_modes: Mapping[int, int] | None = None,
        empty_room_ttl_ms: float = EMPTY_ROOM_TTL_MS,
        forward_log: ForwardLog | None = None,
        notify: Callable[..., None] | None = None,
        on_evict: Callable[[Participant, str], None] | None = None,
        epoch_ms: float = 0.0,
    ):
        self.default_capacity = default_capacity
        self.queue_cap = queue_cap
        self.channel_modes = dict(channel_modes) if channel_modes is not None else _default_modes()
        self.empty_room_ttl_ms = empty_room_ttl_ms
        self.forward_log = forward_log if forward_log is not None else ForwardLog()
        self.notify = notify or (lambda *a, **k: None)
        self.on_evict = on_evict or (lambda p, code: None)
        self.epoch_ms = epoch_ms
        self.rooms: dict[str, Room] = {}
        self._registry_lock = threading.Lock()
        self.latency = LatencyHistogram()
        self.counters = {
            "forwarded_in": 0,
            "enqueued": 0,
            "dropped_backpressure": 0,
            "evictions": 0,
            "non_member_drops": 0,
            "unknown_leaves": 0,
            "rooms_reaped": 0,
        }
        self.max_queue_depth = 0

    # -- rooms ----------------------------------------------------------

    def create_room(self, room_id: str, capacity: int | None = None) -> Room:
        cap = self.default_capacity if capacity is None else capacity
        if cap < 2:
            raise InvalidCapacityError(f"capacity must be >= 2, got {cap}")
        with self._registry_lock:
            if room_id in self.rooms:
                raise RoomExistsError(room_id)
            room = Room(room_id, cap)
            self.rooms[room_id] = room
        return room

    def get_room(self, room_id: str) -> Room:
        try:
            return self.rooms[room_id]
        except KeyError:
            raise RoomNotFoundError(room_id) from None

    def join_room(self, room_id: str, participant: Participant) -> list[str]:
        room = self.get_room(room_id)
        if participant.client_id in room.members:
            raise MemberExistsError(participant.client_id)
        if len(room.members) >= room.capacity:
            raise RoomFullError(f"{room_id} is at capacity {room.capacity}")
        prior = list(room.members)
        for other in room.members.values():
            self.notify(other, "peer_joined", client_id=participant.client_id)
        room.members[participant.client_id] = participant
        room.empty_since = None
        participant.evicted = False
        return prior

    def leave_room(self, room_id: str, client_id: str, now: float = 0.0) -> bool:
        """Remove a member. Unknown rooms or members are a counted no-op."""
        room = self.rooms.get(room_id)
        p = room.members.pop(client_id, None) if room is not None else None
        if p is None:
            self.counters["unknown_leaves"] += 1
            return False
        p.queue.clear()
        for other in room.members.values():
            self.notify(other, "peer_left", client_id=client_id)
        if not room.members:
            room.empty_since = now
        return True

    def reap(self, now: float) -> list[str]:
        """Drop rooms that have been empty for longer than the TTL."""
        gone = [
            rid for rid, r in self.rooms.items()
            if not r.members and r.empty_since is not None and now - r.empty_since >= self.empty_room_ttl_ms
        ]
        with self._registry_lock:
            for rid in gone:
                del self.rooms[rid]
        self.counters["rooms_reaped"] += len(gone)
        return gone

    # -- forwarding -----------------------------------------------------

    def forward(self, room_id: str, sender: str, frame: Frame, now: float) -> list[str]:
        """Queue ``frame`` for every member of the room except ``sender``.

        Returns the client ids the frame was actually queued for.
        """
        room = self.rooms.get(room_id)
        if room is None or sender not in room.members or frame.frame_type != FrameType.DATA:
            self.counters["non_member_drops"] += 1
            return []
        self.counters["forwarded_in"] += 1
        item = QueuedFrame(
            frame.channel_id, frame.frame_type, frame.seq, frame.timestamp_us, frame.payload, now, sender
        )
        mode = self.channel_modes.get(frame.channel_id, 4)
        recipients = []
        evicted = []
        cap = self.queue_cap
        for cid, member in room.members.items():
            if cid == sender:
                continue
            q = member.queue
            if len(q) < cap:
                q.append(item)
                depth = len(q)
                if depth > member.max_depth:
                    member.max_depth = depth
                    if depth > self.max_queue_depth:
                        self.max_queue_depth = depth
                recipients.append(cid)
            elif mode >= 2:
                member.dropped += 1
                self.counters["dropped_backpressure"] += 1
            else:
                evicted.append(member)
        self.counters["enqueued"] += len(recipients)
        for member in evicted:
            self._evict(room, member, now)
        ch = frame.channel_id
        room.forwarded[ch] = room.forwarded.get(ch, 0) + 1
        room.deliveries[ch] = room.deliveries.get(ch, 0) + len(recipients)
        self.forward_log.append(
            ForwardRecord(room_id, sender, ch, frame.seq, len(recipients), int((now - self.epoch_ms) * 1000.0))
        )
        return recipients

    def enqueue_with_backpressure(
        self, recipient: Participant, item: QueuedFrame, room_id: str | None = None, now: float = 0.0
    ) -> Outcome:
        """Queue one frame for one subscriber, applying the overflow policy:
        lossy channels (modes 2-4) drop the newest frame, reliable channels
        evict the subscriber."""
        q = recipient.queue
        if len(q) < self.queue_cap:
            q.append(item)
            depth = len(q)
            recipient.max_depth = max(recipient.max_depth, depth)
            self.max_queue_depth = max(self.max_queue_depth, depth)
            self.counters["enqueued"] += 1
            return Outcome.ENQUEUED
        if self.channel_modes.get(item.channel_id, 4) >= 2:
            recipient.dropped += 1
            self.counters["dropped_backpressure"] += 1
            return Outcome.DROPPED
        room = self.rooms.get(room_id) if room_id is not None else self._room_of(recipient)
        self._evict(room, recipient, now)
        return Outcome.EVICTED

    def _room_of(self, p: Participant) -> Room | None:
        for room in self.rooms.values():
            if room.members.get(p.client_id) is p:
                return room
        return None

    def _evict(self, room: Room | None, member: Participant, now: float) -> None:
        member.slow_consumer = True
        member.evicted = True
        self.counters["evictions"] += 1
        logger.warning("evicting slow consumer %s", member.client_id)
        if room is not None:
            self.leave_room(room.room_id, member.client_id, now)
        member.queue.clear()
        self.on_evict(member, "slow_consumer")

    # -- introspection --------------------------------------------------

    def stats(self) -> dict[str, Any]:
        rooms = {}
        for rid, room in self.rooms.items():
            rooms[rid] = {
                "capacity": room.capacity,
                "members": {
                    cid: {"queue_depth": len(p.queue), "max_queue_depth": p.max_depth, "dropped": p.dropped}
                    for cid, p in room.members.items()
                },
                "forwarded": {str(k): v for k, v in sorted(room.forwarded.items())},
                "deliveries": {str(k): v for k, v in sorted(room.deliveries.items())},
            }
        return {
            "rooms": rooms,
            "counters": dict(self.counters),
            "max_queue_depth": self.max_queue_depth,
            "queue_cap": self.queue_cap,
            "forward_latency": self.latency.snapshot(),
            "forward_log_total": self.forward_log.total,
        }
