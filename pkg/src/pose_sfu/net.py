"""asyncio drivers that put the sans-IO cores on real sockets.

* ``SfuServer``: WebSocket signaling on ``/signal`` (plus ``GET /stats``),
  one UDP socket for every session's datagram path, and a periodic flush.
* ``RelayServer``: the baseline length-prefixed TCP relay.
* ``ClientDriver``: one synthetic client's WebSocket, UDP socket and relay
  stream, with socket-level byte counters kept apart from the client's own.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from http import HTTPStatus
from typing import Any

from websockets.asyncio.client import connect
from websockets.asyncio.server import ServerConnection, serve
from websockets.datastructures import Headers
from websockets.exceptions import ConnectionClosed
from websockets.http11 import Request, Response

from .client import SyntheticClient
from .metrics import CpuMeter
from .sfu import DEFAULT_CAPACITY, SFU, ForwardLog
from .signaling import RelayHub, ServerCore
from .transport import EmulatedLink, apply_emulation

logger = logging.getLogger(__name__)

SIGNAL_PATH = "/signal"
STATS_PATH = "/stats"
FLUSH_INTERVAL_MS = 5.0
READ_CHUNK = 65536


def now_ms() -> float:
    return time.monotonic() * 1000.0


class WsLink:
    """Ordered outbound queue in front of a WebSocket. The cores call
    ``send``/``close`` synchronously; a writer task does the awaiting."""

    def __init__(self, ws: Any):
        self.ws = ws
        self.closing = False
        self._queue: asyncio.Queue[str | None] = asyncio.Queue()
        self._task = asyncio.get_running_loop().create_task(self._writer())

    def send(self, text: str) -> None:
        if not self.closing:
            self._queue.put_nowait(text)

    def close(self) -> None:
        if not self.closing:
            self.closing = True
            self._queue.put_nowait(None)

    async def _writer(self) -> None:
        try:
            while True:
                item = await self._queue.get()
                if item is None:
                    await self.ws.close()
                    return
                await self.ws.send(item)
        except ConnectionClosed:
            self.closing = True
        except Exception:
            logger.exception("websocket writer failed")


class _ServerUdp(asyncio.DatagramProtocol):
    def __init__(self, server: "SfuServer"):
        self.server = server

    def datagram_received(self, data: bytes, addr: Any) -> None:
        server = self.server
        with server.meter:
            server.core.on_datagram(addr, data, now_ms())

    def error_received(self, exc: Exception) -> None:
        logger.debug("udp error: %s", exc)


def _json_response(status: HTTPStatus, obj: Any) -> Response:
    body = json.dumps(obj, sort_keys=True, default=str).encode()
    headers = Headers([("Content-Type", "application/json"), ("Content-Length", str(len(body)))])
    return Response(status.value, status.phrase, headers, body)


class SfuServer:
    def __init__(
        self,
        *,
        host: str = "127.0.0.1",
        ws_port: int = 0,
        udp_host: str | None = None,
        udp_port: int = 0,
        capacity: int = DEFAULT_CAPACITY,
        flush_interval_ms: float = FLUSH_INTERVAL_MS,
        forward_log_path: str | None = None,
        relay: "RelayServer | None" = None,
    ):
        self.host = host
        self.ws_port = ws_port
        self.udp_host = udp_host or host
        self.udp_port = udp_port
        self.capacity = capacity
        self.flush_interval_ms = flush_interval_ms
        self.forward_log_path = forward_log_path
        self.relay = relay
        self.meter = CpuMeter()
        self.core: ServerCore | None = None
        self._ws_server: Any = None
        self._udp: asyncio.DatagramTransport | None = None
        self._ticker: asyncio.Task | None = None

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._udp, _ = await loop.create_datagram_endpoint(lambda: _ServerUdp(self), local_addr=(self.udp_host, self.udp_port))
        self.udp_port = self._udp.get_extra_info("sockname")[1]
        sfu = SFU(default_capacity=self.capacity, forward_log=ForwardLog(csv_path=self.forward_log_path))
        udp = self._udp
        self.core = ServerCore(
            udp_host=self.udp_host,
            udp_port=self.udp_port,
            sfu=sfu,
            send_text=lambda link, text: link.send(text),
            send_datagram=lambda addr, data: udp.sendto(data, addr),
            close_link=lambda link: link.close(),
            epoch_ms=now_ms(),
        )
        self._ws_server = await serve(
            self._handle_ws,
            self.host,
            self.ws_port,
            process_request=self._process_request,
            compression=None,
            ping_interval=None,
        )
        self.ws_port = self._ws_server.sockets[0].getsockname()[1]
        self._ticker = loop.create_task(self._tick_loop())
        logger.info("sfu listening ws=%s:%d udp=%s:%d", self.host, self.ws_port, self.udp_host, self.udp_port)

    @property
    def ws_url(self) -> str:
        return f"ws://{self.host}:{self.ws_port}{SIGNAL_PATH}"

    async def _tick_loop(self) -> None:
        interval = self.flush_interval_ms / 1000.0
        core = self.core
        while True:
            await asyncio.sleep(interval)
            with self.meter:
                core.tick(now_ms())

    def _process_request(self, connection: ServerConnection, request: Request) -> Response | None:
        if request.path == STATS_PATH:
            return _json_response(HTTPStatus.OK, self.stats())
        if request.path != SIGNAL_PATH:
            return connection.respond(HTTPStatus.NOT_FOUND, "not found\n")
        return None

    async def _handle_ws(self, ws: ServerConnection) -> None:
        link = WsLink(ws)
        core = self.core
        with self.meter:
            core.on_link_open(link, now_ms())
        try:
            async for message in ws:
                if isinstance(message, bytes):
                    message = message.decode("utf-8", errors="replace")
                with self.meter:
                    core.on_text(link, message, now_ms())
        except ConnectionClosed:
            pass
        finally:
            with self.meter:
                core.on_link_closed(link, now_ms())
            link.close()

    def stats(self) -> dict[str, Any]:
        out = self.core.stats() if self.core else {}
        out["cpu_seconds"] = self.meter.seconds
        if self.relay is not None:
            out["relay"] = self.relay.stats()
        return out

    async def stop(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()
            try:
                await self._ticker
            except asyncio.CancelledError:
                pass
        if self._ws_server is not None:
            self._ws_server.close()
            await self._ws_server.wait_closed()
        if self._udp is not None:
            self._udp.close()
        if self.core is not None:
            self.core.sfu.forward_log.close()


class RelayServer:
    def __init__(self, *, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self.hub = RelayHub()
        self.meter = CpuMeter()
        self._server: asyncio.AbstractServer | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("relay listening tcp=%s:%d", self.host, self.port)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        hub = self.hub
        with self.meter:
            hub.connect(writer)
        try:
            while True:
                data = await reader.read(READ_CHUNK)
                if not data:
                    break
                with self.meter:
                    hub.on_stream_bytes(writer, data)
                    for dst, out in hub.take_output():
                        if not dst.is_closing():
                            dst.write(out)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            hub.disconnect(writer)
            writer.close()

    def stats(self) -> dict[str, Any]:
        out = self.hub.stats()
        out["cpu_seconds"] = self.meter.seconds
        return out

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


# -- client side ------------------------------------------------------------


class _ClientUdp(asyncio.DatagramProtocol):
    def __init__(self, driver: "ClientDriver"):
        self.driver = driver

    def datagram_received(self, data: bytes, addr: Any) -> None:
        d = self.driver
        link = d.ingress
        if link is None:
            d._deliver(data)
            return
        at = apply_emulation(link, data, now_ms())
        if at is not None:
            asyncio.get_running_loop().call_at(at / 1000.0, d._deliver, data)


class ClientDriver:
    """Connects one :class:`SyntheticClient` to an SFU (and optionally a relay)."""

    def __init__(
        self,
        client: SyntheticClient,
        *,
        ws_url: str,
        relay_addr: tuple[str, int] | None = None,
        egress: EmulatedLink | None = None,
        ingress: EmulatedLink | None = None,
        local_host: str = "127.0.0.1",
    ):
        self.client = client
        self.ws_url = ws_url
        self.relay_addr = relay_addr
        self.egress = egress
        self.ingress = ingress
        self.local_host = local_host
        # socket-level totals, counted independently of the client's counters
        self.udp_bytes_sent = 0
        self.udp_bytes_received = 0
        self.stream_bytes_sent = 0
        self.stream_bytes_received = 0
        self.ws: Any = None
        self._ws_link: WsLink | None = None
        self._udp: asyncio.DatagramTransport | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._tasks: list[asyncio.Task] = []
        client.send_text = self._send_text
        client.send_datagram = self._send_datagram
        client.send_stream = self._send_stream

    async def connect(self) -> None:
        loop = asyncio.get_running_loop()
        self._udp, _ = await loop.create_datagram_endpoint(lambda: _ClientUdp(self), local_addr=(self.local_host, 0))
        if self.client.config.use_relay:
            if self.relay_addr is None:
                raise ValueError("client is configured to use the relay but no relay address was given")
            reader, self._writer = await asyncio.open_connection(*self.relay_addr)
            self._tasks.append(loop.create_task(self._read_stream(reader)))
        self.ws = await connect(self.ws_url, compression=None, ping_interval=None)
        self._ws_link = WsLink(self.ws)
        self._tasks.append(loop.create_task(self._read_ws()))
        self.client.start(now_ms())

    # outbound

    def _send_text(self, text: str) -> None:
        if self._ws_link is not None:
            self._ws_link.send(text)

    def _send_datagram(self, data: bytes) -> None:
        dest = self.client.udp_endpoint
        udp = self._udp
        if dest is None or udp is None:
            return
        self.udp_bytes_sent += len(data)
        link = self.egress
        if link is None:
            udp.sendto(data, dest)
            return
        at = apply_emulation(link, data, now_ms())
        if at is not None:
            asyncio.get_running_loop().call_at(at / 1000.0, udp.sendto, data, dest)

    def _send_stream(self, data: bytes) -> None:
        w = self._writer
        if w is not None and not w.is_closing():
            self.stream_bytes_sent += len(data)
            w.write(data)

    # inbound

    def _deliver(self, data: bytes) -> None:
        self.udp_bytes_received += len(data)
        self.client.on_datagram(data, now_ms())

    async def _read_ws(self) -> None:
        try:
            async for message in self.ws:
                if isinstance(message, bytes):
                    message = message.decode("utf-8", errors="replace")
                self.client.on_text(message, now_ms())
        except ConnectionClosed:
            pass
        finally:
            self.client.ws_closed()

    async def _read_stream(self, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                data = await reader.read(READ_CHUNK)
                if not data:
                    return
                self.stream_bytes_received += len(data)
                self.client.on_stream(data, now_ms())
        except (ConnectionError, asyncio.IncompleteReadError):
            pass

    def kill_ws(self) -> None:
        """Drop the WebSocket without a closing handshake."""
        if self.ws is not None:
            self.ws.transport.abort()

    async def close(self, leave: bool = True) -> None:
        if leave and not self.client.failed:
            self.client.leave(now_ms())
            await asyncio.sleep(0)
        if self._ws_link is not None:
            self._ws_link.close()
        for t in self._tasks:
            t.cancel()
        for t in self._tasks:
            try:
                await t
            except (asyncio.CancelledError, Exception):
                pass
        if self.ws is not None:
            try:
                await asyncio.wait_for(self.ws.close(), 1.0)
            except (asyncio.TimeoutError, ConnectionClosed, OSError):
                pass
        if self._writer is not None:
            self._writer.close()
        if self._udp is not None:
            self._udp.close()


async def tick_clients(drivers: list[ClientDriver], interval_ms: float = FLUSH_INTERVAL_MS) -> None:
    """One shared ticker for every client in this process."""
    interval = interval_ms / 1000.0
    while True:
        await asyncio.sleep(interval)
        t = now_ms()
        for d in drivers:
            d.client.tick(t)


async def wait_until(pred, timeout_s: float, poll_s: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if pred():
            return True
        await asyncio.sleep(poll_s)
    return bool(pred())
