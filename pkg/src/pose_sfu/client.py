"""Synthetic client: joins a room, binds its datagram path, optionally hands
signaling over to channel 0, then publishes poses and audio-like media.

Sans-IO like the server core; drivers provide::

    send_text(text)        # WebSocket message to the SFU role
    send_datagram(data)    # UDP datagram to the SFU role (address from accept)
    send_stream(data)      # bytes on the relay stream
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .avatar import DEFAULT_RATE_HZ, MotionProfile, PoseStore, TickPublisher
from .sfu import LatencyHistogram
from .transport import (
    AUDIO_CHANNEL,
    SIGNAL_CHANNEL,
    TRANSFORM_CHANNEL,
    VIDEO_CHANNEL,
    ChannelSet,
    channel_table_from_wire,
)
from .wire import (
    AUDIO,
    HEADER,
    MAGIC,
    MAX_DATAGRAM,
    MAX_PAYLOAD,
    MEDIA_HEADER,
    VERSION,
    VIDEO,
    Frame,
    FrameType,
    SignalError,
    SignalMessage,
    StreamDecoder,
    WireError,
    decode_pose,
    decode_signal,
    encode_frame,
    encode_signal,
    encode_stream_record,
    signal,
    split_datagram,
)

logger = logging.getLogger(__name__)

_DATA = int(FrameType.DATA)
_SIGNAL = int(FrameType.SIGNAL)


@dataclass
class ClientConfig:
    client_id: str
    room_id: str = "room-1"
    condition: str = "delegated"
    avatar_id: int = 0
    profile: MotionProfile = field(default_factory=MotionProfile)
    transform_rate_hz: float = DEFAULT_RATE_HZ
    audio_pps: float = 50.0
    audio_payload_bytes: int = 120
    video_enabled: bool = False
    video_fps: float = 15.0
    video_payload_bytes: int = 1000
    use_relay: bool = True
    bind_retry_ms: float = 200.0

    def __post_init__(self) -> None:
        if self.condition not in ("baseline", "delegated"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.audio_payload_bytes < MEDIA_HEADER.size or self.audio_payload_bytes > MAX_PAYLOAD:
            raise ValueError(f"audio_payload_bytes must be in [{MEDIA_HEADER.size}, {MAX_PAYLOAD}]")
        if self.video_payload_bytes < MEDIA_HEADER.size or self.video_payload_bytes > MAX_PAYLOAD:
            raise ValueError(f"video_payload_bytes must be in [{MEDIA_HEADER.size}, {MAX_PAYLOAD}]")


class _Schedule:
    """Fixed-rate emission times in microseconds over [start, stop)."""

    __slots__ = ("start_us", "stop_us", "interval", "k")

    def __init__(self, rate: float, start_us: int, stop_us: int | None):
        self.start_us = start_us
        self.stop_us = stop_us
        self.interval = 1e6 / rate
        self.k = 0

    def pop_due(self, now_us: float) -> list[int]:
        out = []
        while True:
            t = self.start_us + round(self.k * self.interval)
            if t > now_us or (self.stop_us is not None and t >= self.stop_us):
                return out
            out.append(t)
            self.k += 1


_COUNTERS = (
    "dgram_bytes_sent", "dgram_bytes_received", "relay_bytes_sent", "relay_bytes_received",
    "datagrams_sent", "datagrams_received",
    "poses_sent", "audio_sent", "video_sent",
    "poses_received", "audio_received", "video_received", "relay_poses_received",
    "pings_sent", "pongs_received", "switch_ok_ws", "switch_ok_datagram",
    "peer_joined", "peer_left", "signal_errors", "decode_errors", "bind_attempts",
)


def _noop(*_a: Any) -> None:
    pass


class SyntheticClient:
    def __init__(
        self,
        config: ClientConfig,
        *,
        send_text: Callable[[str], None] = _noop,
        send_datagram: Callable[[bytes], None] = _noop,
        send_stream: Callable[[bytes], None] = _noop,
        epoch_ms: float = 0.0,
        datagram_budget: int = MAX_DATAGRAM,
        keep_arrivals: bool = False,
    ):
        self.config = config
        self.send_text = send_text
        self.send_datagram = send_datagram
        self.send_stream = send_stream
        self.epoch_ms = epoch_ms
        self.datagram_budget = datagram_budget
        self.state = "idle"
        self.error: SignalMessage | None = None
        self.token: bytes | None = None
        self.udp_endpoint: tuple[str, int] | None = None
        self.channels: ChannelSet | None = None
        self.relay_registered = False
        self.ws_open = False
        self.store = PoseStore()
        self.pose_latency = LatencyHistogram()
        self.media_from: dict[tuple[int, int], int] = {}
        self.counters: dict[str, int] = dict.fromkeys(_COUNTERS, 0)
        self.signals: list[str] = []
        # (source, channel, kind-specific id) in arrival order; tests only
        self.arrivals: list[tuple[int, int, int]] | None = [] if keep_arrivals else None
        self._pending_acks: list[bytes] = []
        self._bind_due: float | None = None
        self._relay_decoder = StreamDecoder()
        self._poses: TickPublisher | None = None
        self._audio: _Schedule | None = None
        self._video: _Schedule | None = None
        self._ping_seq = 0
        rng = random.Random(config.profile.seed ^ 0xA5A5)
        self._audio_blob = rng.randbytes(config.audio_payload_bytes - MEDIA_HEADER.size)
        self._video_blob = rng.randbytes(config.video_payload_bytes - MEDIA_HEADER.size)

    # -- lifecycle ----------------------------------------------------------

    @property
    def client_id(self) -> str:
        return self.config.client_id

    @property
    def ready(self) -> bool:
        cfg = self.config
        if cfg.use_relay and not self.relay_registered:
            return False
        if cfg.condition == "delegated":
            return self.state == "takeover"
        return self.state in ("bound", "takeover")

    @property
    def failed(self) -> bool:
        return self.state in ("failed", "closed")

    def start(self, now: float) -> None:
        cfg = self.config
        self.state = "joining"
        self.ws_open = True
        self.send_text(encode_signal(signal("join", room_id=cfg.room_id, client_id=cfg.client_id, condition=cfg.condition)))
        if cfg.use_relay:
            join = signal("join", room_id=cfg.room_id, client_id=cfg.client_id, condition=cfg.condition)
            frame = encode_frame(Frame(_SIGNAL, SIGNAL_CHANNEL, 0, 0, encode_signal(join).encode()))
            self._stream_out(encode_stream_record(frame))

    def begin_publishing(self, start_ms: float, stop_ms: float | None = None) -> None:
        cfg = self.config
        start_us = int(round((start_ms - self.epoch_ms) * 1000.0))
        stop_us = None if stop_ms is None else int(round((stop_ms - self.epoch_ms) * 1000.0))
        if cfg.transform_rate_hz > 0:
            self._poses = TickPublisher(cfg.profile, cfg.avatar_id, cfg.transform_rate_hz, start_us=start_us, stop_us=stop_us)
        if cfg.audio_pps > 0:
            self._audio = _Schedule(cfg.audio_pps, start_us, stop_us)
        if cfg.video_enabled and cfg.video_fps > 0:
            self._video = _Schedule(cfg.video_fps, start_us, stop_us)

    def stop_publishing(self) -> None:
        self._poses = self._audio = self._video = None

    @property
    def poses_published(self) -> int:
        return self.counters["poses_sent"]

    def leave(self, now: float) -> None:
        msg = encode_signal(signal("leave"))
        if self.state == "takeover" and self.channels is not None:
            self.channels.send(SIGNAL_CHANNEL, msg.encode(), now, frame_type=_SIGNAL)
            self.flush(now)
        elif self.ws_open:
            self.send_text(msg)
        self.stop_publishing()
        self.state = "closed"

    def ws_closed(self) -> None:
        self.ws_open = False

    def ping(self, now: float) -> int:
        seq = self._ping_seq
        self._ping_seq += 1
        self.channels.send_control(FrameType.PING, now, channel_id=SIGNAL_CHANNEL, seq=seq)
        self.counters["pings_sent"] += 1
        return seq

    # -- inbound ------------------------------------------------------------

    def on_text(self, text: str, now: float) -> None:
        try:
            msg = decode_signal(text)
        except SignalError:
            self.counters["signal_errors"] += 1
            return
        self._on_signal(msg, now, via_ws=True)

    def _on_signal(self, msg: SignalMessage, now: float, via_ws: bool) -> None:
        t = msg.type
        self.signals.append(t)
        if t == "accept":
            self.token = bytes.fromhex(msg["token"])
            self.udp_endpoint = (msg["udp_host"], int(msg["udp_port"]))
            self.channels = ChannelSet(channel_table_from_wire(msg["channels"]), epoch_ms=self.epoch_ms)
            self.state = "joined"
            self._send_bind(now)
        elif t == "bind_ok":
            if self.state != "joined":
                return
            self.state = "bound"
            self._bind_due = None
            publishes = [TRANSFORM_CHANNEL, AUDIO_CHANNEL] if self.config.condition == "delegated" else [AUDIO_CHANNEL]
            if self.config.video_enabled:
                publishes.append(VIDEO_CHANNEL)
            self.send_text(encode_signal(signal("publish", channels=publishes)))
            if self.config.condition == "delegated":
                self.send_text(encode_signal(signal("switch")))
        elif t == "switch_ok":
            self.counters["switch_ok_ws" if via_ws else "switch_ok_datagram"] += 1
            if self.state == "bound":
                self.state = "takeover"
        elif t == "peer_joined":
            self.counters["peer_joined"] += 1
        elif t == "peer_left":
            self.counters["peer_left"] += 1
        elif t == "error":
            self.error = msg
            self.state = "failed"
            logger.warning("%s: server error %s: %s", self.client_id, msg["code"], msg["message"])

    def _send_bind(self, now: float) -> None:
        frame = HEADER.pack(MAGIC, VERSION, FrameType.BIND, 0, 0, 0, len(self.token)) + self.token
        self._datagram_out(frame)
        self.counters["bind_attempts"] += 1
        self._bind_due = now + self.config.bind_retry_ms

    def on_datagram(self, data: bytes, now: float) -> None:
        counters = self.counters
        counters["dgram_bytes_received"] += len(data)
        counters["datagrams_received"] += 1
        channels = self.channels
        if channels is None:
            counters["decode_errors"] += 1
            return
        deliveries, acks = channels.on_datagram_in(data, now)
        if acks:
            self._pending_acks.extend(acks)
        for f in deliveries:
            ftype = f.frame_type
            if ftype == _DATA:
                ch = f.channel_id
                if ch == TRANSFORM_CHANNEL:
                    self._on_pose(f, now)
                    counters["poses_received"] += 1
                elif ch == AUDIO_CHANNEL or ch == VIDEO_CHANNEL:
                    self._on_media(f)
            elif ftype == _SIGNAL:
                try:
                    msg = decode_signal(f.payload)
                except SignalError:
                    counters["signal_errors"] += 1
                    continue
                self._on_signal(msg, now, via_ws=False)
            elif ftype == FrameType.PONG:
                counters["pongs_received"] += 1
            elif ftype == FrameType.PING:
                channels.send_control(FrameType.PONG, now, channel_id=f.channel_id, seq=f.seq)
            elif ftype == FrameType.CLOSE:
                self.state = "closed"

    def _on_pose(self, f: Frame, now: float) -> None:
        try:
            avatar_id, pose = decode_pose(f.payload, f.timestamp_us, f.seq)
        except WireError:
            self.counters["decode_errors"] += 1
            return
        self.store.apply(avatar_id, pose)
        self.pose_latency.add((now - self.epoch_ms) - f.timestamp_us / 1000.0)
        if self.arrivals is not None:
            self.arrivals.append((avatar_id, f.channel_id, f.timestamp_us))

    def _on_media(self, f: Frame) -> None:
        if len(f.payload) < MEDIA_HEADER.size:
            self.counters["decode_errors"] += 1
            return
        source_id, kind = MEDIA_HEADER.unpack_from(f.payload)
        self.counters["audio_received" if kind == AUDIO else "video_received"] += 1
        key = (source_id, kind)
        self.media_from[key] = self.media_from.get(key, 0) + 1
        if self.arrivals is not None:
            self.arrivals.append((source_id, f.channel_id, f.timestamp_us))

    def on_stream(self, data: bytes, now: float) -> None:
        self.counters["relay_bytes_received"] += len(data)
        try:
            records = self._relay_decoder.feed(data)
        except WireError:
            self.counters["decode_errors"] += 1
            return
        for rec in records:
            try:
                f = split_datagram(rec)[0]
            except (WireError, IndexError):
                self.counters["decode_errors"] += 1
                continue
            if f.frame_type == _DATA and f.channel_id == TRANSFORM_CHANNEL:
                self._on_pose(f, now)
                self.counters["relay_poses_received"] += 1
            elif f.frame_type == _SIGNAL:
                try:
                    msg = decode_signal(f.payload)
                except SignalError:
                    self.counters["signal_errors"] += 1
                    continue
                if msg.type == "bind_ok":
                    self.relay_registered = True

    # -- outbound -------------------------------------------------------------

    def _datagram_out(self, data: bytes) -> None:
        self.counters["dgram_bytes_sent"] += len(data)
        self.counters["datagrams_sent"] += 1
        self.send_datagram(data)

    def _stream_out(self, data: bytes) -> None:
        self.counters["relay_bytes_sent"] += len(data)
        self.send_stream(data)

    def tick(self, now: float) -> None:
        if self._bind_due is not None and now >= self._bind_due and self.state == "joined":
            self._send_bind(now)
        channels = self.channels
        if channels is not None and self.state in ("bound", "takeover"):
            now_us = (now - self.epoch_ms) * 1000.0
            cfg = self.config
            if self._poses is not None:
                for payload, ts, _seq in self._poses.due(int(now_us)):
                    self.counters["poses_sent"] += 1
                    if cfg.condition == "delegated":
                        channels.send(TRANSFORM_CHANNEL, payload, now, timestamp_us=ts)
                    else:
                        frame = HEADER.pack(MAGIC, VERSION, _DATA, TRANSFORM_CHANNEL, _seq, ts, len(payload)) + payload
                        self._stream_out(encode_stream_record(frame))
            if self._audio is not None:
                for ts in self._audio.pop_due(now_us):
                    payload = MEDIA_HEADER.pack(cfg.avatar_id, AUDIO) + self._audio_blob
                    channels.send(AUDIO_CHANNEL, payload, now, timestamp_us=ts)
                    self.counters["audio_sent"] += 1
            if self._video is not None:
                for ts in self._video.pop_due(now_us):
                    payload = MEDIA_HEADER.pack(cfg.avatar_id, VIDEO) + self._video_blob
                    channels.send(VIDEO_CHANNEL, payload, now, timestamp_us=ts)
                    self.counters["video_sent"] += 1
        self.flush(now)

    def flush(self, now: float) -> None:
        channels = self.channels
        if channels is None or channels.closed or self.state in ("idle", "closed"):
            return
        acks = self._pending_acks
        if acks:
            self._pending_acks = []
        for dg in channels.drain(now, acks, self.datagram_budget):
            self._datagram_out(dg)

    def snapshot(self) -> dict[str, int]:
        return dict(self.counters)
