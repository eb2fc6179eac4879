"""Two-condition experiments and report generation.

An experiment runs every condition for ``repetitions`` rounds (conditions
interleaved within a round), each run against freshly launched role
processes, then summarizes and compares. Reports are rebuilt from the CSVs
alone so ``report`` needs no live system and is byte-stable for fixed input.
"""

from __future__ import annotations

import json
import logging
import os
import select
import signal
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .metrics import (
    EmptySeriesError,
    Summary,
    aggregate,
    compare,
    comparable_config,
    render_comparison,
    render_table_i,
    render_table_ii,
)
from .swarm import (
    RUN_FILE,
    ConfigError,
    Endpoints,
    RunAborted,
    RunArtifact,
    RunConfig,
    RunInterrupted,
    load_artifact,
    make_run_id,
    run_swarm,
    write_artifact,
)

logger = logging.getLogger(__name__)

READY_PREFIX = "READY "
STATS_PREFIX = "STATS "
ROLE_START_TIMEOUT_S = 15.0
ROLE_STOP_TIMEOUT_S = 5.0
SERIES_FILE = "bitrate_series.dat"
REPORT_FILE = "report.md"


@dataclass
class ExperimentConfig:
    run: RunConfig
    repetitions: int = 2
    output_dir: str = "runs"
    conditions: tuple[str, ...] = ("baseline", "delegated")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        reps = d.pop("repetitions", 2)
        out = d.pop("output_dir", "runs")
        conds = d.pop("conditions", ["baseline", "delegated"])
        if not isinstance(reps, int) or reps < 1:
            raise ConfigError(f"repetitions must be an integer >= 1, got {reps!r}")
        if not isinstance(conds, list) or not conds or len(set(conds)) != len(conds):
            raise ConfigError("conditions must be a non-empty list without duplicates")
        d.setdefault("condition", conds[0])
        run = RunConfig.from_dict(d)
        for c in conds:
            RunConfig.from_dict({**d, "condition": c})
        return cls(run, reps, str(out), tuple(conds))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        d = self.run.to_dict()
        d.pop("condition")
        d.update(repetitions=self.repetitions, output_dir=self.output_dir, conditions=list(self.conditions))
        return d

    def run_config(self, condition: str, rep: int) -> RunConfig:
        d = self.run.to_dict()
        d.update(condition=condition, seed=self.run.seed + rep)
        return RunConfig.from_dict(d)


# -- role processes -------------------------------------------------------------


class RoleProcess:
    """One ``pose-sfu serve`` child. Reads its READY line for the bound ports."""

    def __init__(self, args: list[str], name: str):
        self.name = name
        cmd = [sys.executable, "-m", "pose_sfu", "serve", *args]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=None, text=True, bufsize=1)
        self.info = self._await_ready()
        self.final_stats: dict[str, Any] | None = None

    @property
    def pid(self) -> int:
        return self.proc.pid

    def _await_ready(self) -> dict[str, Any]:
        deadline = time.monotonic() + ROLE_START_TIMEOUT_S
        out = self.proc.stdout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise RunAborted(f"{self.name} role exited with code {self.proc.returncode} before becoming ready")
            ready, _, _ = select.select([out], [], [], 0.2)
            if not ready:
                continue
            line = out.readline()
            if line.startswith(READY_PREFIX):
                return json.loads(line[len(READY_PREFIX):])
        self.kill()
        raise RunAborted(f"{self.name} role did not become ready within {ROLE_START_TIMEOUT_S:g} s")

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGINT)
            try:
                rest, _ = self.proc.communicate(timeout=ROLE_STOP_TIMEOUT_S)
            except subprocess.TimeoutExpired:
                self.kill()
                return
        else:
            rest = self.proc.stdout.read() if self.proc.stdout else ""
        for line in (rest or "").splitlines():
            if line.startswith(STATS_PREFIX):
                try:
                    self.final_stats = json.loads(line[len(STATS_PREFIX):])
                except json.JSONDecodeError:
                    pass

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


def launch_roles(config: RunConfig, forward_log: str) -> tuple[RoleProcess, RoleProcess, Endpoints]:
    sfu = RoleProcess(
        [
            "--role", "sfu", "--listen-ws", "127.0.0.1:0", "--listen-udp", "127.0.0.1:0",
            "--capacity", str(config.capacity), "--flush-interval-ms", str(config.flush_interval_ms),
            "--forward-log", forward_log,
        ],
        "sfu",
    )
    try:
        relay = RoleProcess(["--role", "relay", "--listen-relay", "127.0.0.1:0"], "relay")
    except BaseException:
        sfu.kill()
        raise
    host, port = relay.info["relay"]
    return sfu, relay, Endpoints(sfu.info["ws"], host, port, sfu.pid, relay.pid)


def run_one(config: RunConfig, out_dir: Path, run_id: str, in_process: bool = False) -> RunArtifact:
    """Run one swarm against role processes and write its artifact."""
    if in_process:
        return run_swarm(config, out_dir, run_id=run_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    flog = str(out_dir / f".{run_id}.forward_log.csv")
    sfu, relay, endpoints = launch_roles(config, flog)
    artifact: RunArtifact | None = None
    error: BaseException | None = None
    try:
        artifact = run_swarm(config, None, run_id=run_id, endpoints=endpoints)
    except RunAborted as exc:
        artifact, error = exc.artifact, exc
    except KeyboardInterrupt:
        error = RunInterrupted("interrupted")
    finally:
        sfu.stop()
        relay.stop()
    if artifact is None:
        artifact = RunArtifact(run_id, config, partial=True, error=str(error))
    artifact.forward_log_src = flog
    artifact.extras["roles"] = {"sfu": sfu.final_stats, "relay": relay.final_stats}
    write_artifact(artifact, out_dir)
    if error is not None:
        raise error
    return artifact


@dataclass
class ExperimentResult:
    artifacts: list[RunArtifact] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    report_path: Path | None = None
    interrupted: bool = False

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig, *, in_process: bool = False) -> ExperimentResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = ExperimentResult()
    for rep in range(cfg.repetitions):
        for cond in cfg.conditions:
            rc = cfg.run_config(cond, rep)
            run_id = make_run_id(rc, rep)
            logger.info("run %s", run_id)
            try:
                result.artifacts.append(run_one(rc, out, run_id, in_process))
            except RunInterrupted:
                logger.error("run %s interrupted; partial artifact kept", run_id)
                result.failures.append(run_id)
                result.interrupted = True
                break
            except RunAborted as exc:
                logger.error("run %s failed: %s", run_id, exc)
                result.failures.append(run_id)
        if result.interrupted:
            break
    result.report_path = out / REPORT_FILE
    try:
        report = build_report(out)
    except EmptySeriesError:
        result.report_path = None
        return result
    result.report_path.write_text(report.markdown)
    (out / SERIES_FILE).write_text(report.series)
    return result


# -- reporting ------------------------------------------------------------------


@dataclass
class Report:
    markdown: str
    series: str
    warnings: int
    summaries: dict[str, Summary]
    comparison: Any


def _find_runs(in_dir: Path) -> list[Path]:
    return sorted(p.parent for p in in_dir.glob(f"*/{RUN_FILE}") if not p.parent.name.startswith("."))


def build_report(in_dir: str | os.PathLike) -> Report:
    in_dir = Path(in_dir)
    paths = _find_runs(in_dir)
    if not paths:
        raise EmptySeriesError(f"no run artifacts under {in_dir}")
    warnings = 0
    runs: list[RunArtifact] = []
    for p in paths:
        art, bad = load_artifact(p)
        if bad:
            logger.warning("%s: skipped %d corrupt CSV row(s)", p.name, bad)
        warnings += bad
        runs.append(art)
    usable = [r for r in runs if r.summary is not None]
    by_cond: dict[str, list[Summary]] = {}
    for r in usable:
        by_cond.setdefault(r.config.condition, []).append(r.summary)
    summaries = {c: aggregate(by_cond[c]) for c in sorted(by_cond)}

    lines = ["# Pose forwarding experiment report", ""]
    lines += ["## Runs", "", "| run | condition | seed | clients | duration s | windows | status |", "|---|---|---|---|---|---|---|"]
    for r in runs:
        status = "partial" if r.partial else ("complete" if r.summary else "unusable")
        lines.append(
            f"| {r.run_id} | {r.config.condition} | {r.config.seed} | {r.config.clients} | "
            f"{r.config.duration_s:g} | {len(r.bitrate)} | {status} |"
        )
    if warnings:
        lines += ["", f"Warning: {warnings} corrupt CSV row(s) were skipped."]
    if usable:
        echo = comparable_config(usable[0].config.to_dict())
        lines += ["", "Shared configuration (seeds are listed per run above):", "", "```json", json.dumps(echo, indent=2, sort_keys=True), "```"]
    if summaries:
        lines += [
            "", "## Server load by minute", "",
            "Home load is the summed CPU fraction of the roles hosted on the home server: "
            "relay and SFU in the baseline condition, the relay alone in the delegated condition, "
            "where the SFU stands in for an externally hosted service. The direction of this "
            "comparison therefore follows from the deployment split. Values are medians over repetitions.",
            "", render_table_i(summaries),
            "", "## Observed-client bitrates (bit/s)", "",
            "Datagram-path bytes only, as a transport statistics API would report them; "
            "traffic on the relay stream is listed separately. Figures aggregate every "
            "connection of the observed client. Values are medians over repetitions.",
            "", render_table_ii(summaries),
        ]
    comparison = None
    lines += ["", "## Comparison", ""]
    if "baseline" in summaries and "delegated" in summaries:
        comparison = compare(summaries["delegated"], summaries["baseline"])
        lines.append(render_comparison(comparison))
    else:
        lines.append("Only one condition is present; the comparison is omitted.")
    lines += ["", "## Bitrate series", "", f"Per-window series for every run are in `{SERIES_FILE}` (gnuplot index blocks, one per run).", ""]

    series = ["# t_start_s bps_received bps_sent relay_bps_received relay_bps_sent"]
    for r in runs:
        series.append(f"# {r.run_id} {r.config.condition}")
        for s in r.bitrate:
            series.append(
                f"{s.t_window_start_s:g} {s.bits_per_sec_received:.3f} {s.bits_per_sec_sent:.3f} "
                f"{8 * s.relay_bytes_received / s.window_s:.3f} {8 * s.relay_bytes_sent / s.window_s:.3f}"
            )
        series += ["", ""]
    return Report("\n".join(lines), "\n".join(series), warnings, summaries, comparison)
