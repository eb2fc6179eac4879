"""Session lifecycle for the SFU role and the baseline stream relay.

``ServerCore`` is the sans-IO heart of the SFU process: it accepts WebSocket
text messages and UDP datagrams (plus the current time in ms) and emits
output through three callbacks supplied by a driver::

    send_text(link, text)          # WebSocket message
    send_datagram(addr, data)      # UDP datagram
    close_link(link)               # drop a WebSocket

Session states::

    connecting -> ws_established -> datagram_bound -> takeover
         \\______________\\________________\\___________\\__> closed

Once in ``takeover`` signaling runs over SIGNAL frames on channel 0 and the
WebSocket is no longer load-bearing: losing it does not end the session.

``RelayHub`` is the baseline role: length-prefixed frames over a reliable
stream, fanned out to every other connection in the room.
"""

from __future__ import annotations

import logging
import secrets
from collections import deque
from enum import Enum
from typing import Any, Callable, Hashable

from .sfu import SFU, Participant, RoomError
from .transport import DEFAULT_CHANNEL_TABLE, SIGNAL_CHANNEL, ChannelSet, channel_table_to_wire
from .wire import (
    HEADER,
    MAX_DATAGRAM,
    Frame,
    FrameType,
    SignalError,
    SignalMessage,
    StreamDecoder,
    WireError,
    decode_signal,
    encode_frame,
    encode_signal,
    encode_stream_record,
    signal,
    split_datagram,
)

logger = logging.getLogger(__name__)

TOKEN_BYTES = 16
CONDITIONS = ("baseline", "delegated")


class SessionState(str, Enum):
    CONNECTING = "connecting"
    WS_ESTABLISHED = "ws_established"
    DATAGRAM_BOUND = "datagram_bound"
    TAKEOVER = "takeover"
    CLOSED = "closed"


LEGAL_TRANSITIONS = frozenset(
    {
        (SessionState.CONNECTING, SessionState.WS_ESTABLISHED),
        (SessionState.WS_ESTABLISHED, SessionState.DATAGRAM_BOUND),
        (SessionState.DATAGRAM_BOUND, SessionState.TAKEOVER),
    }
    | {(s, SessionState.CLOSED) for s in SessionState if s is not SessionState.CLOSED}
)


class IllegalTransition(RuntimeError):
    pass


class SignalingSession:
    def __init__(self, link: Hashable, now: float = 0.0):
        self.state = SessionState.CONNECTING
        self.link = link
        self.client_id: str | None = None
        self.room_id: str | None = None
        self.condition: str | None = None
        self.token: bytes | None = None
        self.addr: Any = None
        self.channels: ChannelSet | None = None
        self.participant: Participant | None = None
        self.pending_acks: list[bytes] = []
        self.switch_ok_sent = 0
        self.opened_at = now
        self.history: list[SessionState] = [self.state]

    def transition(self, new: SessionState) -> None:
        if (self.state, new) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    def __repr__(self) -> str:
        return f"<SignalingSession {self.client_id} {self.state.value}>"


def _noop(*_a: Any) -> None:
    pass


class ServerCore:
    """Signaling plus datagram plane of the SFU role."""

    def __init__(
        self,
        *,
        udp_host: str = "127.0.0.1",
        udp_port: int = 0,
        sfu: SFU | None = None,
        channel_table=DEFAULT_CHANNEL_TABLE,
        send_text: Callable[[Hashable, str], None] = _noop,
        send_datagram: Callable[[Any, bytes], None] = _noop,
        close_link: Callable[[Hashable], None] = _noop,
        token_factory: Callable[[int], bytes] = secrets.token_bytes,
        auto_create_rooms: bool = True,
        epoch_ms: float = 0.0,
        datagram_budget: int = MAX_DATAGRAM,
    ):
        self.udp_host = udp_host
        self.udp_port = udp_port
        self.channel_table = tuple(channel_table)
        self.send_text = send_text
        self.send_datagram = send_datagram
        self.close_link = close_link
        self.token_factory = token_factory
        self.auto_create_rooms = auto_create_rooms
        self.epoch_ms = epoch_ms
        self.datagram_budget = datagram_budget
        self.sfu = sfu if sfu is not None else SFU(epoch_ms=epoch_ms)
        self.sfu.notify = self._notify
        self.sfu.on_evict = self._on_evict
        self.sessions: dict[Hashable, SignalingSession] = {}
        self.by_token: dict[bytes, SignalingSession] = {}
        self.by_addr: dict[Any, SignalingSession] = {}
        self.bound: list[SignalingSession] = []
        self.closed_log: deque[tuple[str | None, str]] = deque(maxlen=4096)
        self.counters = {
            "sessions_opened": 0,
            "sessions_closed": 0,
            "bind_drops": 0,
            "stray_datagrams": 0,
            "protocol_errors": 0,
            "ws_lost_in_takeover": 0,
            "datagrams_in": 0,
            "datagrams_out": 0,
            "bytes_in": 0,
            "bytes_out": 0,
            "pings": 0,
        }

    # -- WebSocket side ------------------------------------------------

    def on_link_open(self, link: Hashable, now: float) -> SignalingSession:
        session = SignalingSession(link, now)
        self.sessions[link] = session
        self.counters["sessions_opened"] += 1
        return session

    def on_link_closed(self, link: Hashable, now: float) -> None:
        session = self.sessions.pop(link, None)
        if session is None:
            return
        session.link = None
        if session.state is SessionState.TAKEOVER:
            self.counters["ws_lost_in_takeover"] += 1
            return
        self.close_session(session, now, "ws_closed")

    def on_text(self, link: Hashable, text: str, now: float) -> None:
        session = self.sessions.get(link)
        if session is None:
            session = self.on_link_open(link, now)
        try:
            msg = decode_signal(text)
        except SignalError as exc:
            self._protocol_error(session, "bad_message", str(exc), now)
            return
        self._dispatch_signal(session, msg, now)

    def _dispatch_signal(self, session: SignalingSession, msg: SignalMessage, now: float) -> None:
        t = msg.type
        if t == "join":
            self.handle_join(session, msg, now)
        elif t == "switch":
            self.handle_switch(session, now)
        elif t == "leave":
            self.close_session(session, now, "leave")
        elif t == "publish":
            pass
        else:
            self._protocol_error(session, "unexpected_message", f"clients may not send {t!r}", now)

    def handle_join(self, session: SignalingSession, msg: SignalMessage, now: float) -> SignalMessage | None:
        if session.state is not SessionState.CONNECTING:
            self._protocol_error(session, "protocol_error", "join on an already joined session", now)
            return None
        condition = msg["condition"]
        if condition not in CONDITIONS:
            self._fail(session, "bad_condition", f"unknown condition {condition!r}", now)
            return None
        room_id = str(msg["room_id"])
        client_id = str(msg["client_id"])
        participant = Participant(client_id, session)
        try:
            if room_id not in self.sfu.rooms and self.auto_create_rooms:
                self.sfu.create_room(room_id)
            prior = self.sfu.join_room(room_id, participant)
        except RoomError as exc:
            self._fail(session, exc.code, str(exc) or exc.code, now)
            return None
        session.client_id = client_id
        session.room_id = room_id
        session.condition = condition
        session.participant = participant
        session.token = self.token_factory(TOKEN_BYTES)
        self.by_token[session.token] = session
        session.channels = ChannelSet(self.channel_table, epoch_ms=self.epoch_ms)
        session.transition(SessionState.WS_ESTABLISHED)
        accept = signal(
            "accept",
            udp_host=self.udp_host,
            udp_port=self.udp_port,
            token=session.token.hex(),
            channels=channel_table_to_wire(self.channel_table),
            peers=prior,
        )
        self.send_signal(session, accept, now)
        return accept

    def _fail(self, session: SignalingSession, code: str, text: str, now: float) -> None:
        self.send_signal(session, signal("error", code=code, message=text), now)
        self.close_session(session, now, code)

    def _protocol_error(self, session: SignalingSession, code: str, text: str, now: float) -> None:
        self.counters["protocol_errors"] += 1
        self._fail(session, code, text, now)

    def handle_switch(self, session: SignalingSession, now: float) -> SignalMessage | None:
        if session.state is not SessionState.DATAGRAM_BOUND:
            code = "not_bound" if session.state is SessionState.WS_ESTABLISHED else "bad_state"
            self.send_signal(session, signal("error", code=code, message=f"switch in {session.state.value}"), now)
            return None
        ok = signal("switch_ok")
        text = encode_signal(ok)
        if session.link is not None:
            self.send_text(session.link, text)
        session.transition(SessionState.TAKEOVER)
        session.channels.send(SIGNAL_CHANNEL, text.encode(), now, frame_type=FrameType.SIGNAL)
        session.switch_ok_sent += 1
        return ok

    def send_signal(self, session: SignalingSession, msg: SignalMessage, now: float) -> None:
        text = encode_signal(msg)
        if session.state is SessionState.TAKEOVER:
            session.channels.send(SIGNAL_CHANNEL, text.encode(), now, frame_type=FrameType.SIGNAL)
        elif session.link is not None:
            self.send_text(session.link, text)

    def _notify(self, participant: Participant, type_: str, **fields: Any) -> None:
        session = participant.session
        if session is not None and session.state is not SessionState.CLOSED:
            self.send_signal(session, signal(type_, **fields), self._now)

    def _on_evict(self, participant: Participant, code: str) -> None:
        session = participant.session
        if session is None:
            return
        self.send_signal(session, signal("error", code=code, message="subscriber queue overflow"), self._now)
        self._flush_session(session, self._now)
        self.close_session(session, self._now, code)

    _now = 0.0

    # -- datagram side ----------------------------------------------------

    def on_datagram(self, addr: Any, data: bytes, now: float) -> None:
        self._now = now
        counters = self.counters
        counters["datagrams_in"] += 1
        counters["bytes_in"] += len(data)
        session = self.by_addr.get(addr)
        if session is None:
            try:
                frames = split_datagram(data)
            except WireError:
                counters["stray_datagrams"] += 1
                return
            for f in frames:
                if f.frame_type == FrameType.BIND:
                    self.bind_datagram(addr, f, now)
                else:
                    counters["stray_datagrams"] += 1
            return
        deliveries, acks = session.channels.on_datagram_in(data, now)
        if acks:
            session.pending_acks.extend(acks)
        if not deliveries:
            return
        sfu = self.sfu
        room_id = session.room_id
        client_id = session.client_id
        for f in deliveries:
            ftype = f.frame_type
            if ftype == FrameType.DATA:
                if f.channel_id != SIGNAL_CHANNEL:
                    sfu.forward(room_id, client_id, f, now)
            elif ftype == FrameType.SIGNAL:
                self._on_datagram_signal(session, f, now)
            elif ftype == FrameType.PING:
                counters["pings"] += 1
                session.channels.send_control(FrameType.PONG, now, channel_id=f.channel_id, seq=f.seq, payload=f.payload)
            elif ftype == FrameType.CLOSE:
                self.close_session(session, now, "close_frame")
                return
            if session.state is SessionState.CLOSED:
                return

    def _on_datagram_signal(self, session: SignalingSession, f: Frame, now: float) -> None:
        if session.state is not SessionState.TAKEOVER:
            counters = self.counters
            counters["protocol_errors"] += 1
            return
        try:
            msg = decode_signal(f.payload)
        except SignalError as exc:
            self._protocol_error(session, "bad_message", str(exc), now)
            return
        self._dispatch_signal(session, msg, now)

    def bind_datagram(self, addr: Any, frame: Frame, now: float) -> bool:
        session = self.by_token.get(bytes(frame.payload))
        if session is None or session.state is not SessionState.WS_ESTABLISHED:
            # silent: never answer an unauthenticated source
            self.counters["bind_drops"] += 1
            return False
        if addr in self.by_addr:
            self.counters["bind_drops"] += 1
            return False
        del self.by_token[session.token]
        session.addr = addr
        self.by_addr[addr] = session
        self.bound.append(session)
        session.transition(SessionState.DATAGRAM_BOUND)
        self.send_signal(session, signal("bind_ok"), now)
        return True

    # -- lifecycle ---------------------------------------------------------

    def close_session(self, session: SignalingSession, now: float, reason: str) -> None:
        if session.state is SessionState.CLOSED:
            return
        p = session.participant
        if p is not None and not p.evicted and session.room_id is not None:
            self.sfu.leave_room(session.room_id, p.client_id, now)
        if session.token is not None:
            self.by_token.pop(session.token, None)
        if session.addr is not None:
            self.by_addr.pop(session.addr, None)
            try:
                self.bound.remove(session)
            except ValueError:
                pass
        if session.channels is not None:
            session.channels.close()
        session.transition(SessionState.CLOSED)
        self.counters["sessions_closed"] += 1
        self.closed_log.append((session.client_id, reason))
        if session.link is not None:
            link = session.link
            self.sessions.pop(link, None)
            session.link = None
            self.close_link(link)

    def flush(self, now: float) -> None:
        """Drain subscriber queues onto their channels and put due frames on the wire."""
        self._now = now
        for session in list(self.bound):
            self._flush_session(session, now)

    def _flush_session(self, session: SignalingSession, now: float) -> None:
        channels = session.channels
        if channels is None or channels.closed or session.addr is None:
            return
        p = session.participant
        q = p.queue if p is not None else None
        if q:
            hist = self.sfu.latency
            counts = hist.counts
            res = hist.RESOLUTION_MS
            top = hist.BUCKETS
            send = channels.send
            chans = channels.channels
            worst = 0.0
            n = 0
            while q:
                item = q[0]
                ch = chans.get(item.channel_id)
                if ch is None:
                    q.popleft()
                    continue
                if ch.pacing:
                    # send window closed: leave the rest queued so the
                    # subscriber queue cap (and its overflow policy) applies
                    break
                q.popleft()
                send(item.channel_id, item.payload, now, timestamp_us=item.timestamp_us)
                ms = now - item.ingress_ms
                i = int(ms / res)
                counts[i if i < top else top] += 1
                if ms > worst:
                    worst = ms
                n += 1
            hist.n += n
            if worst > hist.max_ms:
                hist.max_ms = worst
        acks = session.pending_acks
        if acks:
            session.pending_acks = []
        elif not channels.outbox:
            nd = channels.next_deadline()
            if nd is None or nd > now:
                return
        datagrams = channels.drain(now, acks, self.datagram_budget)
        addr = session.addr
        counters = self.counters
        for dg in datagrams:
            self.send_datagram(addr, dg)
            counters["datagrams_out"] += 1
            counters["bytes_out"] += len(dg)

    def tick(self, now: float) -> None:
        self.flush(now)
        self.sfu.reap(now)

    def session_for(self, client_id: str) -> SignalingSession | None:
        for s in list(self.sessions.values()) + self.bound:
            if s.client_id == client_id:
                return s
        return None

    def stats(self) -> dict[str, Any]:
        states: dict[str, int] = {}
        seen = set()
        for s in list(self.sessions.values()) + self.bound:
            if id(s) in seen:
                continue
            seen.add(id(s))
            states[s.state.value] = states.get(s.state.value, 0) + 1
        channel_totals: dict[str, int] = {}
        for s in self.bound:
            if s.channels is not None:
                for k, v in s.channels.counters.items():
                    channel_totals[k] = channel_totals.get(k, 0) + v
        out = self.sfu.stats()
        out["sessions"] = states
        out["server"] = dict(self.counters)
        out["channels"] = channel_totals
        return out


# -- baseline relay -------------------------------------------------------


class UnregisteredConnection(KeyError):
    pass


class RelayHub:
    """Fan-out over reliable streams, one buffer per connection.

    A connection registers by sending a SIGNAL frame carrying a ``join``
    message as its first record; the hub answers with ``bind_ok``. Every
    later DATA record is copied to every other connection in the room.
    """

    def __init__(self, *, keep_log: int = 0):
        self.rooms: dict[str, dict[Hashable, str]] = {}
        self.conns: dict[Hashable, tuple[str, str]] = {}
        self.buffers: dict[Hashable, bytearray] = {}
        self._decoders: dict[Hashable, StreamDecoder] = {}
        self.log: deque[tuple[str, str, int]] | None = deque(maxlen=keep_log) if keep_log else None
        self.counters = {
            "records_in": 0,
            "records_out": 0,
            "bytes_in": 0,
            "bytes_out": 0,
            "bad_records": 0,
            "connections": 0,
        }

    def connect(self, conn: Hashable) -> None:
        self._decoders[conn] = StreamDecoder()
        self.buffers[conn] = bytearray()
        self.counters["connections"] += 1

    def register(self, conn: Hashable, room_id: str, client_id: str) -> None:
        self.rooms.setdefault(room_id, {})[conn] = client_id
        self.conns[conn] = (room_id, client_id)
        self.buffers.setdefault(conn, bytearray())

    def disconnect(self, conn: Hashable) -> None:
        entry = self.conns.pop(conn, None)
        if entry is not None:
            room = self.rooms.get(entry[0])
            if room is not None:
                room.pop(conn, None)
                if not room:
                    del self.rooms[entry[0]]
        self.buffers.pop(conn, None)
        self._decoders.pop(conn, None)

    def relay_transform(self, from_conn: Hashable, frame_bytes: bytes) -> int:
        """Copy one frame to every other connection in the sender's room; returns N-1."""
        entry = self.conns.get(from_conn)
        if entry is None:
            raise UnregisteredConnection(from_conn)
        room_id, sender = entry
        record = encode_stream_record(frame_bytes)
        n = 0
        log = self.log
        seq = HEADER.unpack_from(frame_bytes)[4] if log is not None else 0
        for conn, client_id in self.rooms[room_id].items():
            if conn == from_conn:
                continue
            self.buffers[conn] += record
            n += 1
            if log is not None:
                log.append((sender, client_id, seq))
        self.counters["records_out"] += n
        self.counters["bytes_out"] += n * len(record)
        return n

    def on_stream_bytes(self, conn: Hashable, data: bytes) -> None:
        self.counters["bytes_in"] += len(data)
        dec = self._decoders.get(conn)
        if dec is None:
            self.connect(conn)
            dec = self._decoders[conn]
        try:
            records = dec.feed(data)
        except WireError:
            self.counters["bad_records"] += 1
            return
        for rec in records:
            self.counters["records_in"] += 1
            try:
                frame = split_datagram(rec)[0]
            except (WireError, IndexError):
                self.counters["bad_records"] += 1
                continue
            if frame.frame_type == FrameType.SIGNAL and conn not in self.conns:
                try:
                    msg = decode_signal(frame.payload)
                except SignalError:
                    self.counters["bad_records"] += 1
                    continue
                if msg.type != "join":
                    self.counters["bad_records"] += 1
                    continue
                self.register(conn, str(msg["room_id"]), str(msg["client_id"]))
                ok = encode_frame(Frame(FrameType.SIGNAL, 0, 0, 0, encode_signal(signal("bind_ok")).encode()))
                self.buffers[conn] += encode_stream_record(ok)
            elif frame.frame_type == FrameType.DATA and conn in self.conns:
                self.relay_transform(conn, rec)
            else:
                self.counters["bad_records"] += 1

    def take_output(self) -> list[tuple[Hashable, bytes]]:
        out = []
        for conn, buf in self.buffers.items():
            if buf:
                out.append((conn, bytes(buf)))
                buf.clear()
        return out

    def stats(self) -> dict[str, Any]:
        return {
            "rooms": {rid: len(m) for rid, m in self.rooms.items()},
            "counters": dict(self.counters),
        }
