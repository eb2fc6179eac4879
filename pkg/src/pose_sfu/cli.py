"""Command line: serve roles, run swarms and experiments, rebuild reports.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``POSE_SFU_LOG`` (DEBUG, INFO, WARNING, ...) to change the log level.
"""

from __future__ import annotations

import argparse
import asyncio
import errno
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Sequence

from .metrics import EmptySeriesError
from .sfu import DEFAULT_CAPACITY

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

logger = logging.getLogger("pose_sfu")


def _configure_logging() -> None:
    name = os.environ.get("POSE_SFU_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    bad = not isinstance(level, int)
    logging.basicConfig(
        level=logging.WARNING if bad else level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if bad:
        logger.warning("ignoring unknown POSE_SFU_LOG level %r", name)


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        p = int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from None
    if not 0 <= p <= 65535:
        raise argparse.ArgumentTypeError(f"port out of range in {text!r}")
    return host, p


def _capacity(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"capacity must be an integer, got {text!r}") from None
    if n < 2:
        raise argparse.ArgumentTypeError("capacity must be >= 2")
    return n


# -- serve --------------------------------------------------------------------


async def _serve(args: argparse.Namespace) -> int:
    from .net import RelayServer, SfuServer

    relay = sfu = None
    info: dict[str, object] = {"pid": os.getpid(), "role": args.role}
    try:
        if args.role in ("relay", "both"):
            host, port = args.listen_relay
            relay = RelayServer(host=host, port=port)
            await relay.start()
            info["relay"] = [relay.host, relay.port]
        if args.role in ("sfu", "both"):
            ws_host, ws_port = args.listen_ws
            udp_host, udp_port = args.listen_udp
            sfu = SfuServer(
                host=ws_host,
                ws_port=ws_port,
                udp_host=udp_host,
                udp_port=udp_port,
                capacity=args.capacity,
                flush_interval_ms=args.flush_interval_ms,
                forward_log_path=args.forward_log,
                relay=relay,
            )
            await sfu.start()
            info["ws"] = sfu.ws_url
            info["udp"] = [sfu.udp_host, sfu.udp_port]
            info["stats"] = f"http://{ws_host}:{sfu.ws_port}/stats"
    except OSError as exc:
        if relay is not None:
            await relay.stop()
        if exc.errno == errno.EADDRINUSE:
            print(f"pose-sfu serve: address already in use: {exc}", file=sys.stderr)
        else:
            print(f"pose-sfu serve: cannot listen: {exc}", file=sys.stderr)
        return EXIT_USAGE

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    print("READY " + json.dumps(info, sort_keys=True), flush=True)
    await stop.wait()

    stats: dict[str, object] = {}
    if sfu is not None:
        stats["sfu"] = sfu.stats()
        await sfu.stop()
    if relay is not None:
        stats["relay"] = relay.stats()
        await relay.stop()
    print("STATS " + json.dumps(stats, sort_keys=True, default=str), flush=True)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    return asyncio.run(_serve(args))


# -- swarm ----------------------------------------------------------------------


def _run_config_from_args(args: argparse.Namespace):
    from .swarm import RunConfig

    base: dict[str, object] = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {
        "condition": args.condition,
        "clients": args.clients,
        "duration_s": args.duration,
        "transform_rate_hz": args.rate,
        "audio_pps": args.audio_pps,
        "seed": args.seed,
        "transport": args.transport,
        "loss": args.loss,
        "latency_ms": args.latency_ms,
        "jitter_ms": args.jitter_ms,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(base)


def cmd_swarm(args: argparse.Namespace) -> int:
    from .swarm import ConfigError, Endpoints, RunAborted, run_swarm

    try:
        config = _run_config_from_args(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"pose-sfu swarm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    endpoints = None
    if args.ws_url:
        if not args.relay:
            print("pose-sfu swarm: --ws-url needs --relay HOST:PORT", file=sys.stderr)
            return EXIT_USAGE
        endpoints = Endpoints(args.ws_url, args.relay[0], args.relay[1])
    try:
        artifact = run_swarm(config, args.out, endpoints=endpoints)
    except RunAborted as exc:
        print(f"pose-sfu swarm: run aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ConfigError as exc:
        print(f"pose-sfu swarm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    s = artifact.summary
    print(f"run {artifact.run_id}: {len(artifact.bitrate)} windows, {len(artifact.load)} load samples")
    if s is not None:
        print(f"  received {s.received_mean:.1f} bit/s (sd {s.received_sd:.1f}), sent {s.sent_mean:.1f} bit/s (sd {s.sent_sd:.1f})")
        print(f"  home load {s.home_load_mean:.4f} (sd {s.home_load_sd:.4f})")
    if artifact.path:
        print(f"  artifact: {artifact.path}")
    return EXIT_OK


# -- experiment ---------------------------------------------------------------------


def cmd_experiment(args: argparse.Namespace) -> int:
    from .experiment import ExperimentConfig, run_experiment
    from .swarm import ConfigError

    try:
        cfg = ExperimentConfig.load(args.config)
    except ConfigError as exc:
        print(f"pose-sfu experiment: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        cfg.output_dir = args.out
    result = run_experiment(cfg, in_process=args.in_process)
    done = len(result.artifacts)
    print(f"{done} run(s) complete, {len(result.failures)} failed")
    if result.report_path:
        print(f"report: {result.report_path}")
    if result.interrupted:
        print("interrupted; partial artifacts kept", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_FAILURE


# -- report ---------------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    from .experiment import SERIES_FILE, build_report

    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        print(f"pose-sfu report: {in_dir} is not a directory", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = build_report(in_dir)
    except EmptySeriesError as exc:
        print(f"pose-sfu report: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(args.out)
    out.write_text(report.markdown)
    series = Path(args.series) if args.series else out.with_name(SERIES_FILE)
    series.write_text(report.series)
    if report.warnings:
        print(f"pose-sfu report: {report.warnings} corrupt row(s) skipped", file=sys.stderr)
    print(f"report: {out}\nseries: {series}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pose-sfu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the SFU and/or relay roles")
    p.add_argument("--role", choices=("sfu", "relay", "both"), default="both")
    p.add_argument("--listen-ws", type=_hostport, default=("127.0.0.1", 8765), metavar="HOST:PORT")
    p.add_argument("--listen-udp", type=_hostport, default=("127.0.0.1", 8766), metavar="HOST:PORT")
    p.add_argument("--listen-relay", type=_hostport, default=("127.0.0.1", 8767), metavar="HOST:PORT")
    p.add_argument("--capacity", type=_capacity, default=DEFAULT_CAPACITY, help="room capacity (default %(default)s)")
    p.add_argument("--flush-interval-ms", type=float, default=5.0)
    p.add_argument("--forward-log", default=None, metavar="CSV", help="write every forward record to this CSV")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("swarm", help="run one synthetic-client swarm")
    p.add_argument("--config", help="RunConfig JSON; flags override its fields")
    p.add_argument("--condition", choices=("baseline", "delegated"))
    p.add_argument("--clients", type=int)
    p.add_argument("--duration", type=float, help="seconds (>= 30)")
    p.add_argument("--rate", type=float, help="transform rate in Hz")
    p.add_argument("--audio-pps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--transport", choices=("udp", "loopback"))
    p.add_argument("--loss", type=float)
    p.add_argument("--latency-ms", type=float)
    p.add_argument("--jitter-ms", type=float)
    p.add_argument("--ws-url", help="use an already running SFU role instead of in-process roles")
    p.add_argument("--relay", type=_hostport, metavar="HOST:PORT")
    p.add_argument("--out", default="runs", help="artifact directory (default %(default)s)")
    p.set_defaults(func=cmd_swarm)

    p = sub.add_parser("experiment", help="run both conditions with repetitions and write a report")
    p.add_argument("config", help="ExperimentConfig JSON")
    p.add_argument("--out", help="override output_dir from the config")
    p.add_argument("--in-process", action="store_true", help="host roles in this process (tests only)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="rebuild summaries and comparison from run CSVs")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    p.add_argument("--out", default="report.md")
    p.add_argument("--series", help="series file path (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
