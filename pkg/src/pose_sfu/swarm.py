"""Synthetic-client swarms and run artifacts.

A run joins ``clients`` synthetic clients to one room, lets them publish for
``duration_s`` and samples the observed client every 3 s and the server roles
every minute. Two transports share the same timeline:

* ``udp``: real sockets on the loopback interface, asyncio, real time.
* ``loopback``: the in-process discrete-event network, virtual time.
"""

from __future__ import annotations

import asyncio
import gc
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .avatar import MAX_RATE_HZ, MIN_RATE_HZ, MotionProfile
from .client import ClientConfig, SyntheticClient
from .metrics import (
    MINUTE_S,
    WINDOW_S,
    BitrateSample,
    ByteCounters,
    LoadSample,
    LoadSampler,
    MetricsError,
    Summary,
    compute_bitrate,
    host_loadavg,
    read_bitrate_csv,
    read_load_csv,
    summarize,
    write_bitrate_csv,
    write_load_csv,
)
from .sfu import DEFAULT_CAPACITY, ForwardLog
from .signaling import CONDITIONS
from .transport import EmulatedLink

logger = logging.getLogger(__name__)

TRANSPORTS = ("udp", "loopback")
PARTIAL_MARKER = "PARTIAL"
RUN_FILE = "run.json"
BITRATE_FILE = "bitrate.csv"
LOAD_FILE = "load.csv"
FORWARD_LOG_FILE = "forward_log.csv"
JOIN_SPACING_MS = 10.0
LEAD_IN_MS = 200.0


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    def __init__(self, message: str, artifact: "RunArtifact | None" = None):
        super().__init__(message)
        self.artifact = artifact


class ClockError(RunAborted):
    pass


class RunInterrupted(RunAborted):
    pass


@dataclass
class RunConfig:
    condition: str = "delegated"
    clients: int = 12
    duration_s: float = 300.0
    transform_rate_hz: float = 10.0
    audio_pps: float = 50.0
    audio_payload_bytes: int = 120
    video_enabled: bool = False
    video_fps: float = 15.0
    video_payload_bytes: int = 1000
    loss: float = 0.0
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 1
    observed_client: int = 0
    room_id: str = "classroom"
    transport: str = "udp"
    drain_s: float = 1.0
    capacity: int = DEFAULT_CAPACITY
    flush_interval_ms: float = 5.0
    join_timeout_s: float = 20.0
    # loopback only: charge the SFU/relay handlers' real CPU time to the virtual clock
    model_role_cpu: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if not isinstance(self.clients, int) or self.clients < 2:
            raise ConfigError(f"clients must be an integer >= 2, got {self.clients!r}")
        if self.duration_s < 30:
            raise ConfigError(f"duration_s must be >= 30, got {self.duration_s}")
        if not MIN_RATE_HZ <= self.transform_rate_hz <= MAX_RATE_HZ:
            raise ConfigError(f"transform_rate_hz must be in [{MIN_RATE_HZ:g}, {MAX_RATE_HZ:g}]")
        if self.audio_pps < 0 or self.video_fps < 0:
            raise ConfigError("packet rates must be >= 0")
        if not 0.0 <= self.loss <= 1.0:
            raise ConfigError("loss must be a probability")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency and jitter must be >= 0")
        if not 0 <= self.observed_client < self.clients:
            raise ConfigError(f"observed_client {self.observed_client} out of range")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if self.capacity < 2:
            raise ConfigError("capacity must be >= 2")
        if self.clients > self.capacity:
            raise ConfigError(f"{self.clients} clients exceed room capacity {self.capacity}")
        if self.drain_s < 0 or self.flush_interval_ms <= 0:
            raise ConfigError("drain_s must be >= 0 and flush_interval_ms > 0")
        try:
            ClientConfig("probe", audio_payload_bytes=self.audio_payload_bytes, video_payload_bytes=self.video_payload_bytes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def emulated(self) -> bool:
        return self.loss > 0 or self.latency_ms > 0 or self.jitter_ms > 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def client_config(self, i: int) -> ClientConfig:
        return ClientConfig(
            client_id=f"client-{i:03d}",
            room_id=self.room_id,
            condition=self.condition,
            avatar_id=i,
            profile=MotionProfile(seed=self.seed * 1000 + i),
            transform_rate_hz=self.transform_rate_hz,
            audio_pps=self.audio_pps,
            audio_payload_bytes=self.audio_payload_bytes,
            video_enabled=self.video_enabled,
            video_fps=self.video_fps,
            video_payload_bytes=self.video_payload_bytes,
        )


@dataclass
class RunArtifact:
    run_id: str
    config: RunConfig
    bitrate: list[BitrateSample] = field(default_factory=list)
    load: list[LoadSample] = field(default_factory=list)
    final_window: BitrateSample | None = None
    socket_totals: dict[str, int] = field(default_factory=dict)
    summary: Summary | None = None
    partial: bool = False
    error: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)
    path: Path | None = None
    forward_log_src: str | None = None

    @property
    def forward_log_path(self) -> Path | None:
        if self.path is None:
            return None
        p = self.path / FORWARD_LOG_FILE
        return p if p.exists() else None


def make_run_id(config: RunConfig, rep: int | None = None) -> str:
    base = f"{config.condition}-c{config.clients}-d{config.duration_s:g}-s{config.seed}"
    return base if rep is None else f"{base}-r{rep}"


# -- sampling ---------------------------------------------------------------


class Collector:
    """Samples the observed client on the run grid: a bitrate window every
    3 s and a role-load sample every minute, both aligned to run start."""

    def __init__(
        self,
        config: RunConfig,
        observed: SyntheticClient,
        sampler: LoadSampler,
        socket_totals: Any,
        use_loadavg: bool = True,
    ):
        self.config = config
        self.observed = observed
        self.sampler = sampler
        self.socket_totals = socket_totals  # () -> (udp_sent, udp_received)
        self.use_loadavg = use_loadavg
        self.bitrate: list[BitrateSample] = []
        self.load: list[LoadSample] = []
        self.final_window: BitrateSample | None = None
        self.n_windows = int(math.floor(config.duration_s / WINDOW_S + 1e-9))
        self.n_minutes = int(math.floor(config.duration_s / MINUTE_S + 1e-9))
        self.partial_minute = config.duration_s - self.n_minutes * MINUTE_S > 1e-9
        self._prev: ByteCounters | None = None
        self._last_t = -math.inf
        self.sockets_at_start: tuple[int, int] = (0, 0)
        self.sockets_at_end: tuple[int, int] = (0, 0)

    def _counters(self) -> ByteCounters:
        return ByteCounters.from_client(self.observed.counters)

    def _check_clock(self, t_s: float) -> None:
        if t_s < self._last_t:
            raise ClockError(f"clock went backwards: {self._last_t} -> {t_s}")
        self._last_t = t_s

    def start(self, t_s: float) -> None:
        self._check_clock(t_s)
        self._prev = self._counters()
        self.sockets_at_start = tuple(self.socket_totals())
        self.sampler.start(t_s)

    def window(self, k: int, t_s: float) -> None:
        """Close window ``k`` (0-based) at relative time ``t_s``."""
        self._check_clock(t_s)
        cur = self._counters()
        self.bitrate.append(compute_bitrate(self._prev, cur, k * WINDOW_S, WINDOW_S))
        self._prev = cur

    def minute(self, m: int, t_s: float, partial: bool = False) -> None:
        self._check_clock(t_s)
        la = host_loadavg() if self.use_loadavg else None
        self.load.append(self.sampler.sample(t_s, m, partial=partial, loadavg=la))

    def finish(self, t_end_s: float) -> None:
        """Final partial window from the last full window to the end of drain."""
        self._check_clock(t_end_s)
        start = self.n_windows * WINDOW_S
        cur = self._counters()
        span = t_end_s - start
        if span > 0:
            self.final_window = compute_bitrate(self._prev, cur, start, span)
        self._prev = cur
        self.sockets_at_end = tuple(self.socket_totals())

    def events(self) -> list[tuple[float, str, int]]:
        """(relative time s, kind, index) in execution order."""
        ev = [((k + 1) * WINDOW_S, "window", k) for k in range(self.n_windows)]
        ev += [((m + 1) * MINUTE_S, "minute", m) for m in range(self.n_minutes)]
        if self.partial_minute:
            ev.append((self.config.duration_s, "partial_minute", self.n_minutes))
        ev.sort(key=lambda e: (e[0], e[1] != "window"))
        return ev

    def fire(self, kind: str, index: int, t_s: float) -> None:
        if kind == "window":
            self.window(index, t_s)
        elif kind == "minute":
            self.minute(index, t_s)
        else:
            self.minute(index, t_s, partial=True)


def _client_extras(clients: list[SyntheticClient], observed: SyntheticClient, config: RunConfig) -> dict[str, Any]:
    store = observed.store
    return {
        "observed_client": observed.client_id,
        "observed_counters": dict(observed.counters),
        "observed_received_per_avatar": {str(a): store.received(a) for a in store.avatars()},
        "observed_pose_latency": observed.pose_latency.snapshot(),
        "sent_per_client": {c.client_id: c.counters["poses_sent"] for c in clients},
        "avatar_of": {c.client_id: c.config.avatar_id for c in clients},
        "clients_ready": sum(1 for c in clients if c.state in ("bound", "takeover", "closed")),
    }


def _finalize(artifact: RunArtifact, col: Collector) -> RunArtifact:
    artifact.bitrate = col.bitrate
    artifact.load = col.load
    artifact.final_window = col.final_window
    s0, s1 = col.sockets_at_start, col.sockets_at_end
    artifact.socket_totals = {
        "udp_sent_start": s0[0], "udp_received_start": s0[1],
        "udp_sent_end": s1[0], "udp_received_end": s1[1],
    }
    if not artifact.partial and artifact.bitrate and artifact.load:
        artifact.summary = summarize(artifact.bitrate, artifact.load, artifact.config.to_dict(), artifact.run_id)
    return artifact


# -- loopback transport -------------------------------------------------------


def _run_loopback(config: RunConfig, run_id: str, forward_log_path: str | None, keep_deployment: bool) -> RunArtifact:
    from .sim import LinkParams, LoopbackNetwork, SimDeployment

    # whatever the host process allocated before this run is not part of
    # the modelled roles; keep the collector from walking it
    gc.freeze()
    net = LoopbackNetwork(
        seed=config.seed,
        link=LinkParams(config.loss, config.latency_ms, config.jitter_ms),
    )
    flog = ForwardLog(csv_path=forward_log_path)
    dep = SimDeployment(
        net,
        capacity=config.capacity,
        flush_interval_ms=config.flush_interval_ms,
        token_seed=config.seed,
        forward_log=flog,
        cpu_timed=config.model_role_cpu,
    )
    artifact = RunArtifact(run_id, config, forward_log_src=forward_log_path)
    clients = []
    for i in range(config.clients):
        net.run_until(net.now + (JOIN_SPACING_MS if i else 0.0))
        clients.append(dep.add_client(config.client_config(i)))
    observed = clients[config.observed_client]
    if config.model_role_cpu:
        probes = {"sfu": _NodeProbe(net, "sfu"), "relay": _NodeProbe(net, "relay")}
    else:
        probes = {"sfu": dep.sfu_meter, "relay": dep.relay_meter}
    sampler = LoadSampler(config.condition, probes)
    col = Collector(config, observed, sampler, lambda: dep.udp_totals(observed.client_id), use_loadavg=False)
    try:
        if not dep.wait_ready(config.join_timeout_s * 1000.0):
            bad = [c.client_id for c in clients if not c.ready]
            raise RunAborted(f"{len(bad)} client(s) failed to join: {', '.join(bad[:5])}")
        t0 = net.now + LEAD_IN_MS
        net.run_until(t0)
        for c in clients:
            c.begin_publishing(t0, t0 + config.duration_s * 1000.0)
        col.start(0.0)
        for t_rel, kind, idx in col.events():
            net.run_until(t0 + t_rel * 1000.0)
            col.fire(kind, idx, t_rel)
        end = config.duration_s + config.drain_s
        net.run_until(t0 + end * 1000.0)
        col.finish(end)
    except RunAborted as exc:
        artifact.partial = True
        artifact.error = str(exc)
    finally:
        dep.stop()
        flog.close()
        gc.unfreeze()
    artifact.extras = _client_extras(clients, observed, config)
    artifact.extras["server"] = dep.core.stats()
    artifact.extras["relay"] = dep.relay.stats()
    artifact.extras["virtual_time"] = True
    if config.model_role_cpu:
        artifact.extras["gc_seconds_excluded"] = {n: round(net.node_gc_seconds(n), 3) for n in ("sfu", "relay")}
    if keep_deployment:
        artifact.extras["_deployment"] = dep
    return _finalize(artifact, col)


class _NodeProbe:
    def __init__(self, net: Any, name: str):
        self.net = net
        self.name = name

    def cpu_seconds(self) -> float:
        return self.net.node_cpu_seconds(self.name)


# -- udp transport ------------------------------------------------------------


@dataclass
class Endpoints:
    ws_url: str
    relay_host: str
    relay_port: int
    sfu_pid: int | None = None
    relay_pid: int | None = None


async def _run_udp(
    config: RunConfig,
    run_id: str,
    endpoints: Endpoints | None,
    probes: Mapping[str, Any] | None,
    forward_log_path: str | None,
    holder: dict[str, Any],
) -> RunArtifact:
    from .net import ClientDriver, RelayServer, SfuServer, now_ms, tick_clients, wait_until

    artifact = holder["artifact"] = RunArtifact(run_id, config, forward_log_src=forward_log_path)
    servers: list[Any] = []
    if endpoints is None:
        relay = RelayServer()
        await relay.start()
        sfu = SfuServer(
            capacity=config.capacity,
            flush_interval_ms=config.flush_interval_ms,
            forward_log_path=forward_log_path,
            relay=relay,
        )
        await sfu.start()
        servers = [sfu, relay]
        endpoints = Endpoints(sfu.ws_url, relay.host, relay.port)
        probes = probes or {"sfu": sfu.meter, "relay": relay.meter}
    elif probes is None:
        from .metrics import NullProbe, ProcessCpuProbe

        probes = {
            "sfu": ProcessCpuProbe(endpoints.sfu_pid) if endpoints.sfu_pid else NullProbe(),
            "relay": ProcessCpuProbe(endpoints.relay_pid) if endpoints.relay_pid else NullProbe(),
        }
    drivers: list[ClientDriver] = []
    for i in range(config.clients):
        egress = ingress = None
        if config.emulated:
            egress = EmulatedLink(config.loss, config.latency_ms, config.jitter_ms, config.seed * 7919 + 2 * i)
            ingress = EmulatedLink(config.loss, config.latency_ms, config.jitter_ms, config.seed * 7919 + 2 * i + 1)
        client = SyntheticClient(config.client_config(i), epoch_ms=0.0)
        drivers.append(ClientDriver(client, ws_url=endpoints.ws_url, relay_addr=(endpoints.relay_host, endpoints.relay_port), egress=egress, ingress=ingress))
    clients = [d.client for d in drivers]
    obs_driver = drivers[config.observed_client]
    observed = obs_driver.client
    sampler = LoadSampler(config.condition, probes)
    col = holder["collector"] = Collector(config, observed, sampler, lambda: (obs_driver.udp_bytes_sent, obs_driver.udp_bytes_received))
    ticker = asyncio.get_running_loop().create_task(tick_clients(drivers, config.flush_interval_ms))
    try:
        try:
            for d in drivers:
                await d.connect()
                await asyncio.sleep(JOIN_SPACING_MS / 1000.0)
        except OSError as exc:
            raise RunAborted(f"cannot reach server roles: {exc}") from exc
        ok = await wait_until(lambda: all(c.ready or c.failed for c in clients), config.join_timeout_s)
        if not ok or not all(c.ready for c in clients):
            bad = [c.client_id for c in clients if not c.ready]
            raise RunAborted(f"{len(bad)} client(s) failed to join: {', '.join(bad[:5])}")
        t0 = now_ms() + LEAD_IN_MS
        for c in clients:
            c.begin_publishing(t0, t0 + config.duration_s * 1000.0)
        await asyncio.sleep(max(0.0, (t0 - now_ms()) / 1000.0))
        col.start((now_ms() - t0) / 1000.0 if now_ms() > t0 else 0.0)
        for t_rel, kind, idx in col.events():
            await asyncio.sleep(max(0.0, (t0 + t_rel * 1000.0 - now_ms()) / 1000.0))
            col.fire(kind, idx, (now_ms() - t0) / 1000.0)
        end = config.duration_s + config.drain_s
        await asyncio.sleep(max(0.0, (t0 + end * 1000.0 - now_ms()) / 1000.0))
        col.finish((now_ms() - t0) / 1000.0)
    except RunAborted as exc:
        artifact.partial = True
        artifact.error = str(exc)
    except asyncio.CancelledError:
        artifact.partial = True
        artifact.error = "interrupted"
        raise
    finally:
        ticker.cancel()
        artifact.extras = _client_extras(clients, observed, config)
        artifact.extras["socket_observed"] = {
            "udp_sent": obs_driver.udp_bytes_sent, "udp_received": obs_driver.udp_bytes_received,
            "stream_sent": obs_driver.stream_bytes_sent, "stream_received": obs_driver.stream_bytes_received,
        }
        for d in drivers:
            await d.close(leave=False)
        if servers:
            artifact.extras["server"] = servers[0].stats()
            for s in servers:
                await s.stop()
    return _finalize(artifact, col)


# -- entry point ----------------------------------------------------------------


def run_swarm(
    config: RunConfig,
    out_dir: str | os.PathLike | None = None,
    *,
    run_id: str | None = None,
    endpoints: Endpoints | None = None,
    probes: Mapping[str, Any] | None = None,
    keep_deployment: bool = False,
) -> RunArtifact:
    """Run one swarm. With ``out_dir`` the artifact is written there
    atomically (``out_dir/<run_id>/``); a failed run leaves a ``PARTIAL``
    marker next to whatever was collected and raises :class:`RunAborted`."""
    config.validate()
    run_id = run_id or make_run_id(config)
    staging = None
    flog_path = None
    if out_dir is not None:
        staging = Path(out_dir) / f".{run_id}.tmp"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        flog_path = str(staging / FORWARD_LOG_FILE)
    if config.transport == "loopback":
        if endpoints is not None:
            raise ConfigError("loopback runs host their own roles; endpoints are not accepted")
        artifact = _run_loopback(config, run_id, flog_path, keep_deployment)
    else:
        holder: dict[str, Any] = {}
        try:
            artifact = asyncio.run(_run_udp(config, run_id, endpoints, probes, flog_path, holder))
        except KeyboardInterrupt:
            artifact = holder.get("artifact")
            if artifact is None:
                raise
            artifact.partial = True
            artifact.error = "interrupted"
            if "collector" in holder:
                _finalize(artifact, holder["collector"])
            if out_dir is not None:
                write_artifact(artifact, out_dir)
            raise RunInterrupted("interrupted", artifact) from None
    if out_dir is not None:
        write_artifact(artifact, out_dir)
    if artifact.partial:
        raise RunAborted(artifact.error or "run aborted", artifact)
    return artifact


def _sample_dict(s: BitrateSample | None) -> dict[str, Any] | None:
    return None if s is None else asdict(s)


def write_artifact(artifact: RunArtifact, out_dir: str | os.PathLike) -> Path:
    """Write CSVs and run.json into a staging directory, then rename it into
    place. A forward log already written elsewhere is moved in first."""
    out = Path(out_dir)
    staging = out / f".{artifact.run_id}.tmp"
    staging.mkdir(parents=True, exist_ok=True)
    src = artifact.forward_log_src
    if src and Path(src).exists() and Path(src).resolve() != (staging / FORWARD_LOG_FILE).resolve():
        shutil.move(src, staging / FORWARD_LOG_FILE)
    write_bitrate_csv(staging / BITRATE_FILE, artifact.run_id, artifact.extras.get("observed_client", ""), artifact.bitrate)
    write_load_csv(staging / LOAD_FILE, artifact.run_id, artifact.load)
    extras = {k: v for k, v in artifact.extras.items() if not k.startswith("_")}
    doc = {
        "run_id": artifact.run_id,
        "config": artifact.config.to_dict(),
        "partial": artifact.partial,
        "error": artifact.error,
        "final_window": _sample_dict(artifact.final_window),
        "socket_totals": artifact.socket_totals,
        "summary": artifact.summary.to_dict() if artifact.summary else None,
        "extras": extras,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (staging / RUN_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    if artifact.partial:
        (staging / PARTIAL_MARKER).write_text((artifact.error or "aborted") + "\n")
    final = out / artifact.run_id
    if final.exists():
        shutil.rmtree(final)
    os.replace(staging, final)
    artifact.path = final
    return final


def load_artifact(path: str | os.PathLike) -> tuple[RunArtifact, int]:
    """Rebuild an artifact from its directory using the CSVs as the source of
    truth. Returns the artifact and the number of skipped (corrupt) rows."""
    p = Path(path)
    doc = json.loads((p / RUN_FILE).read_text())
    config = RunConfig.from_dict(doc["config"])
    bitrate, bad_b = read_bitrate_csv(p / BITRATE_FILE)
    load, bad_l = read_load_csv(p / LOAD_FILE)
    fw = doc.get("final_window")
    artifact = RunArtifact(
        run_id=doc["run_id"],
        config=config,
        bitrate=bitrate,
        load=load,
        final_window=BitrateSample(**fw) if fw else None,
        socket_totals=doc.get("socket_totals", {}),
        partial=bool(doc.get("partial")) or (p / PARTIAL_MARKER).exists(),
        error=doc.get("error"),
        extras=doc.get("extras", {}),
        path=p,
    )
    if not artifact.partial and bitrate and load:
        try:
            artifact.summary = summarize(bitrate, load, config.to_dict(), artifact.run_id)
        except MetricsError:
            artifact.summary = None
    return artifact, bad_b + bad_l
