"""In-process loopback network on a discrete-event virtual clock.

Datagram links pass through :class:`EmulatedLink` (seeded loss, latency,
jitter); stream links are lossless FIFO message pipes. With identical seeds
a run is fully deterministic.

A node may be registered as *CPU-timed*: its handlers then occupy the node
for the thread CPU time they actually consume, later events queue behind
it, and its outputs leave when the work finishes. This turns the virtual
clock into a single-server queueing model of that role, so latency figures
reflect real processing cost rather than zero-cost simulation.

Garbage-collector pauses are not charged to the node that happened to
trigger them: every role and client shares this one process heap, so a
collection traverses far more than any single role would own.
"""

from __future__ import annotations

import gc
import heapq
import itertools
import random
import time
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Hashable

from .client import ClientConfig, SyntheticClient
from .metrics import CpuMeter
from .sfu import DEFAULT_CAPACITY, SFU, ForwardLog
from .signaling import RelayHub, ServerCore
from .transport import EmulatedLink, apply_emulation
from .wire import MAX_DATAGRAM

Handler = Callable[..., None]


@dataclass(frozen=True)
class LinkParams:
    loss_probability: float = 0.0
    base_latency_ms: float = 0.1
    jitter_ms: float = 0.0


class Periodic:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class _Node:
    __slots__ = ("name", "busy_until", "cpu_s", "gc_s", "deferred")

    def __init__(self, name: str):
        self.name = name
        self.busy_until = 0.0
        self.cpu_s = 0.0
        self.gc_s = 0.0  # collector time seen inside handlers, excluded from cpu_s
        self.deferred: list[tuple[Callable, tuple]] | None = None


class StreamEnd:
    """One side of a simulated reliable stream (WebSocket or TCP)."""

    __slots__ = ("net", "peer", "on_message", "on_close", "closed", "node", "bytes_sent", "bytes_received", "_last_at", "name")

    def __init__(self, net: "LoopbackNetwork", node: str | None, name: str):
        self.net = net
        self.peer: StreamEnd | None = None
        self.on_message: Callable[[Any, float], None] | None = None
        self.on_close: Callable[[float], None] | None = None
        self.closed = False
        self.node = node
        self.bytes_sent = 0
        self.bytes_received = 0
        self._last_at = 0.0
        self.name = name

    def send(self, data: Any) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            return
        self.bytes_sent += len(data)
        net = self.net
        at = max(net.now + net.stream_latency_ms, self._last_at)
        self._last_at = at
        net._emit(self.node, at, self.peer.node, self.peer._deliver, (data,))

    def _deliver(self, data: Any) -> None:
        if self.closed:
            return
        self.bytes_received += len(data)
        if self.on_message is not None:
            self.on_message(data, self.net.now)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        if peer is not None and not peer.closed:
            net = self.net
            at = max(net.now + net.stream_latency_ms, self._last_at)
            net._emit(self.node, at, peer.node, peer._remote_closed, ())

    def _remote_closed(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.on_close is not None:
            self.on_close(self.net.now)

    def __repr__(self) -> str:
        return f"<StreamEnd {self.name}>"


class LoopbackNetwork:
    def __init__(self, *, seed: int = 0, link: LinkParams = LinkParams(), stream_latency_ms: float = 0.1):
        self.now = 0.0
        self.seed = seed
        self.link_params = link
        self.stream_latency_ms = stream_latency_ms
        self._heap: list[tuple[float, int, str | None, Callable, tuple]] = []
        self._counter = itertools.count()
        self._udp: dict[Hashable, tuple[str | None, Callable[[bytes, Hashable, float], None]]] = {}
        self._links: dict[tuple[Hashable, Hashable], EmulatedLink] = {}
        self._nodes: dict[str, _Node] = {}
        self._current: _Node | None = None
        self.events = 0
        self.udp_bytes: dict[Hashable, list[int]] = {}  # addr -> [sent, received]
        self._gc_s = 0.0
        self._gc_t0 = 0.0

    def _on_gc(self, phase: str, info: dict) -> None:
        if phase == "start":
            self._gc_t0 = time.thread_time()
        else:
            self._gc_s += time.thread_time() - self._gc_t0

    # -- scheduling ----------------------------------------------------------

    def add_node(self, name: str, cpu_timed: bool = True) -> None:
        if cpu_timed:
            self._nodes[name] = _Node(name)

    def node_cpu_seconds(self, name: str) -> float:
        node = self._nodes.get(name)
        return node.cpu_s if node else 0.0

    def node_gc_seconds(self, name: str) -> float:
        node = self._nodes.get(name)
        return node.gc_s if node else 0.0

    def at(self, t: float, fn: Callable, *args: Any, node: str | None = None) -> None:
        heapq.heappush(self._heap, (max(t, self.now), next(self._counter), node, fn, args))

    def after(self, delay_ms: float, fn: Callable, *args: Any, node: str | None = None) -> None:
        self.at(self.now + delay_ms, fn, *args, node=node)

    def every(self, interval_ms: float, fn: Callable[[float], None], *, start: float | None = None, node: str | None = None) -> Periodic:
        handle = Periodic()

        def fire() -> None:
            if handle.cancelled:
                return
            fn(self.now)
            if not handle.cancelled:
                self.at(t0[0] + interval_ms, fire, node=node)
                t0[0] += interval_ms

        t0 = [self.now if start is None else start]
        self.at(t0[0], fire, node=node)
        return handle

    def _emit(self, src_node: str | None, at: float, dst_node: str | None, fn: Callable, args: tuple) -> None:
        cur = self._current
        if cur is not None and cur.deferred is not None:
            # sent from inside a CPU-timed handler: leaves when the work is done
            cur.deferred.append((at - self.now, dst_node, fn, args))
            return
        self.at(at, fn, *args, node=dst_node)

    def run_until(self, t_end: float) -> None:
        if not self._nodes:
            self._run(t_end)
            return
        gc.callbacks.append(self._on_gc)
        try:
            self._run(t_end)
        finally:
            gc.callbacks.remove(self._on_gc)

    def _run(self, t_end: float) -> None:
        heap = self._heap
        nodes = self._nodes
        pop = heapq.heappop
        while heap and heap[0][0] <= t_end:
            t, _, node_name, fn, args = pop(heap)
            node = nodes.get(node_name) if node_name is not None else None
            if node is None:
                self.now = t
                self.events += 1
                fn(*args)
                continue
            if t < node.busy_until:
                heapq.heappush(heap, (node.busy_until, next(self._counter), node_name, fn, args))
                continue
            self.now = t
            self.events += 1
            node.deferred = []
            self._current = node
            g0 = self._gc_s
            c0 = time.thread_time()
            try:
                fn(*args)
            finally:
                spent = time.thread_time() - c0
                self._current = None
                deferred, node.deferred = node.deferred, None
            paused = self._gc_s - g0
            if paused:
                node.gc_s += paused
                spent = max(0.0, spent - paused)
            node.cpu_s += spent
            done = t + spent * 1000.0
            node.busy_until = done
            for delay, dst, dfn, dargs in deferred:
                heapq.heappush(heap, (done + delay, next(self._counter), dst, dfn, dargs))
        self.now = max(self.now, t_end)

    def run_for(self, ms: float) -> None:
        self.run_until(self.now + ms)

    def run_until_true(self, pred: Callable[[], bool], limit_ms: float, step_ms: float = 1.0) -> bool:
        end = self.now + limit_ms
        while self.now < end:
            if pred():
                return True
            self.run_until(min(self.now + step_ms, end))
        return pred()

    # -- datagrams -------------------------------------------------------------

    def bind(self, addr: Hashable, handler: Callable[[bytes, Hashable, float], None], node: str | None = None) -> None:
        self._udp[addr] = (node, handler)
        self.udp_bytes.setdefault(addr, [0, 0])

    def link(self, src: Hashable, dst: Hashable) -> EmulatedLink:
        key = (src, dst)
        link = self._links.get(key)
        if link is None:
            p = self.link_params
            link_seed = zlib.crc32(repr((self.seed, src, dst)).encode())
            link = self._links[key] = EmulatedLink(p.loss_probability, p.base_latency_ms, p.jitter_ms, link_seed)
        return link

    def sendto(self, src: Hashable, dst: Hashable, data: bytes) -> None:
        counts = self.udp_bytes.get(src)
        if counts is not None:
            counts[0] += len(data)
        at = apply_emulation(self.link(src, dst), data, self.now)
        if at is None:
            return
        entry = self._udp.get(dst)
        node = entry[0] if entry else None
        src_node = self._current.name if self._current is not None else None
        self._emit(src_node, at, node, self._deliver_udp, (src, dst, data))

    def _deliver_udp(self, src: Hashable, dst: Hashable, data: bytes) -> None:
        entry = self._udp.get(dst)
        if entry is None:
            return
        self.udp_bytes[dst][1] += len(data)
        entry[1](data, src, self.now)

    # -- streams -----------------------------------------------------------------

    def connect_stream(self, a_node: str | None, b_node: str | None, name: str = "") -> tuple[StreamEnd, StreamEnd]:
        a = StreamEnd(self, a_node, name + ":a")
        b = StreamEnd(self, b_node, name + ":b")
        a.peer, b.peer = b, a
        return a, b


# -- deployment harness ------------------------------------------------------

SFU_UDP_ADDR = ("sfu", 5000)


class SimDeployment:
    """SFU role, relay role and synthetic clients wired onto one
    :class:`LoopbackNetwork`. Role CPU is attributed with per-role meters."""

    def __init__(
        self,
        net: LoopbackNetwork,
        *,
        capacity: int = DEFAULT_CAPACITY,
        flush_interval_ms: float = 5.0,
        client_tick_ms: float = 5.0,
        token_seed: int = 0,
        forward_log: ForwardLog | None = None,
        cpu_timed: bool = False,
        datagram_budget: int = MAX_DATAGRAM,
    ):
        self.net = net
        self.client_tick_ms = client_tick_ms
        net.add_node("sfu", cpu_timed)
        net.add_node("relay", cpu_timed)
        self.sfu_meter = CpuMeter()
        self.relay_meter = CpuMeter()
        rng = random.Random(token_seed)
        self.core = ServerCore(
            udp_host=SFU_UDP_ADDR[0],
            udp_port=SFU_UDP_ADDR[1],
            sfu=SFU(default_capacity=capacity, forward_log=forward_log),
            send_text=lambda link, text: link.send(text),
            send_datagram=lambda addr, data: net.sendto(SFU_UDP_ADDR, addr, data),
            close_link=lambda link: link.close(),
            token_factory=rng.randbytes,
            datagram_budget=datagram_budget,
        )
        self.relay = RelayHub()
        self.clients: dict[str, SyntheticClient] = {}
        self.addrs: dict[str, tuple[str, int]] = {}
        self.ws: dict[str, tuple[StreamEnd, StreamEnd]] = {}
        self.relay_links: dict[str, tuple[StreamEnd, StreamEnd]] = {}
        self._tickers: dict[str, Periodic] = {}
        net.bind(SFU_UDP_ADDR, self._sfu_datagram, node="sfu")
        self._sfu_ticker = net.every(flush_interval_ms, self._sfu_tick, node="sfu")

    # role entry points, metered

    def _sfu_datagram(self, data: bytes, src: Any, now: float) -> None:
        with self.sfu_meter:
            self.core.on_datagram(src, data, now)

    def _sfu_tick(self, now: float) -> None:
        with self.sfu_meter:
            self.core.tick(now)

    def _sfu_text(self, link: StreamEnd, text: str, now: float) -> None:
        with self.sfu_meter:
            self.core.on_text(link, text, now)

    def _sfu_link_closed(self, link: StreamEnd, now: float) -> None:
        with self.sfu_meter:
            self.core.on_link_closed(link, now)

    def _relay_in(self, conn: StreamEnd, data: bytes) -> None:
        with self.relay_meter:
            self.relay.on_stream_bytes(conn, data)
            for dst, out in self.relay.take_output():
                dst.send(out)

    def _relay_closed(self, conn: StreamEnd) -> None:
        with self.relay_meter:
            self.relay.disconnect(conn)

    # clients

    def add_client(self, config: ClientConfig, *, keep_arrivals: bool = False, start: bool = True) -> SyntheticClient:
        net = self.net
        cid = config.client_id
        if cid in self.clients:
            raise ValueError(f"duplicate client id {cid!r}")
        addr = (f"c-{cid}", 40000 + len(self.clients))
        c_ws, s_ws = net.connect_stream(None, "sfu", f"ws-{cid}")
        c_rl, s_rl = net.connect_stream(None, "relay", f"relay-{cid}")

        def send_datagram(data: bytes) -> None:
            net.sendto(addr, client.udp_endpoint, data)

        client = SyntheticClient(
            config,
            send_text=c_ws.send,
            send_datagram=send_datagram,
            send_stream=c_rl.send,
            keep_arrivals=keep_arrivals,
        )
        c_ws.on_message = client.on_text
        c_ws.on_close = lambda now: client.ws_closed()
        s_ws.on_message = lambda text, now: self._sfu_text(s_ws, text, now)
        s_ws.on_close = lambda now: self._sfu_link_closed(s_ws, now)
        c_rl.on_message = client.on_stream
        s_rl.on_message = lambda data, now: self._relay_in(s_rl, data)
        s_rl.on_close = lambda now: self._relay_closed(s_rl)
        net.bind(addr, lambda data, src, now: client.on_datagram(data, now))
        self.clients[cid] = client
        self.addrs[cid] = addr
        self.ws[cid] = (c_ws, s_ws)
        self.relay_links[cid] = (c_rl, s_rl)
        # stagger client ticks across the tick interval so they do not all fire together
        offset = (len(self.clients) * 0.37) % self.client_tick_ms
        self._tickers[cid] = net.every(self.client_tick_ms, client.tick, start=net.now + offset)
        if start:
            client.start(net.now)
        return client

    def kill_ws(self, client_id: str) -> None:
        """Drop the client's WebSocket; both ends see the loss."""
        self.ws[client_id][0].close()
        self.clients[client_id].ws_closed()

    def remove_client(self, client_id: str) -> None:
        client = self.clients[client_id]
        client.leave(self.net.now)
        self._tickers.pop(client_id).cancel()
        c_ws, _ = self.ws[client_id]
        c_rl, _ = self.relay_links[client_id]
        c_ws.close()
        c_rl.close()

    def all_ready(self) -> bool:
        return all(c.ready for c in self.clients.values())

    def any_failed(self) -> bool:
        return any(c.failed for c in self.clients.values())

    def wait_ready(self, limit_ms: float = 10_000.0) -> bool:
        self.net.run_until_true(lambda: self.all_ready() or self.any_failed(), limit_ms)
        return self.all_ready()

    def udp_totals(self, client_id: str) -> tuple[int, int]:
        sent, received = self.net.udp_bytes[self.addrs[client_id]]
        return sent, received

    def stream_totals(self, client_id: str) -> tuple[int, int]:
        end = self.relay_links[client_id][0]
        return end.bytes_sent, end.bytes_received

    def stop(self) -> None:
        self._sfu_ticker.cancel()
        for t in self._tickers.values():
            t.cancel()
