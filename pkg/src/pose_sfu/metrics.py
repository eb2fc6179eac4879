"""Measurement pipeline: 3-second bitrate windows, per-minute server load,
run summaries and the two-condition comparison report."""

from __future__ import annotations

import csv
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

WINDOW_S = 3.0
MINUTE_S = 60.0

BITRATE_COLUMNS = (
    "run_id", "client_id", "t_start_s", "bytes_sent", "bytes_received", "bps_sent", "bps_received",
    "relay_bytes_sent", "relay_bytes_received",
)
LOAD_COLUMNS = ("run_id", "minute", "host_loadavg", "cpu_relay", "cpu_sfu", "home_load", "partial")

# roles co-hosted on the "home" server in each condition; the delegated SFU
# stands in for an externally hosted service
HOME_SET = {"baseline": ("relay", "sfu"), "delegated": ("relay",)}

# (delegated, baseline) as published; used only for direction checks
PAPER_REFERENCE = {
    "home_load_mean": (0.058, 0.108),
    "home_load_sd": (0.0584, 0.0271),
    "received_mean": (54204.932, 12234.112),
    "received_sd": (3970.0196, 3262.1003),
    "sent_mean": (64399.084, 28333.127),
    "sent_sd": (225.6512, 3115.1473),
}


class MetricsError(Exception):
    pass


class CounterRegression(MetricsError):
    pass


class EmptySeriesError(MetricsError, ValueError):
    pass


class ConfigMismatchError(MetricsError, ValueError):
    pass


# -- bitrate ----------------------------------------------------------------


@dataclass(frozen=True)
class ByteCounters:
    sent: int = 0
    received: int = 0
    relay_sent: int = 0
    relay_received: int = 0

    @classmethod
    def from_client(cls, counters: Mapping[str, int]) -> "ByteCounters":
        return cls(
            counters["dgram_bytes_sent"],
            counters["dgram_bytes_received"],
            counters["relay_bytes_sent"],
            counters["relay_bytes_received"],
        )


@dataclass(frozen=True)
class BitrateSample:
    t_window_start_s: float
    window_s: float
    bytes_sent: int
    bytes_received: int
    bits_per_sec_sent: float
    bits_per_sec_received: float
    relay_bytes_sent: int = 0
    relay_bytes_received: int = 0


def compute_bitrate(prev: ByteCounters, cur: ByteCounters, t_start_s: float, window_s: float = WINDOW_S) -> BitrateSample:
    """Bitrate over one window from two counter snapshots (datagram path only;
    relay bytes are carried alongside as raw byte deltas)."""
    deltas = (
        cur.sent - prev.sent,
        cur.received - prev.received,
        cur.relay_sent - prev.relay_sent,
        cur.relay_received - prev.relay_received,
    )
    if min(deltas) < 0:
        raise CounterRegression(f"byte counters went backwards: {prev} -> {cur}")
    if window_s <= 0:
        raise MetricsError("window must be positive")
    sent, received, relay_sent, relay_received = deltas
    return BitrateSample(
        t_start_s, window_s, sent, received, 8 * sent / window_s, 8 * received / window_s, relay_sent, relay_received
    )


# -- load -------------------------------------------------------------------


@dataclass(frozen=True)
class LoadSample:
    t_minute_index: int
    host_loadavg: float | None
    cpu_relay: float
    cpu_sfu: float
    home_load: float
    partial: bool = False


def home_load(condition: str, cpu: Mapping[str, float]) -> float:
    return sum(cpu.get(role, 0.0) for role in HOME_SET[condition])


class CpuMeter:
    """Accumulates thread CPU time spent inside ``with meter:`` blocks; lets
    roles that share a process or thread be attributed separately."""

    __slots__ = ("seconds", "_t0")

    def __init__(self) -> None:
        self.seconds = 0.0
        self._t0 = 0.0

    def __enter__(self) -> "CpuMeter":
        self._t0 = time.thread_time()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.seconds += time.thread_time() - self._t0

    def cpu_seconds(self) -> float:
        return self.seconds


class ProcessCpuProbe:
    """user+system CPU seconds of another process (a role launched separately)."""

    def __init__(self, pid: int):
        import psutil

        self._proc = psutil.Process(pid)

    def cpu_seconds(self) -> float:
        t = self._proc.cpu_times()
        return t.user + t.system


class NullProbe:
    def cpu_seconds(self) -> float:
        return 0.0


def host_loadavg() -> float | None:
    try:
        return os.getloadavg()[0]
    except (AttributeError, OSError):
        return None


class LoadSampler:
    """Turns cumulative per-role CPU seconds into per-interval CPU fractions."""

    def __init__(self, condition: str, probes: Mapping[str, Any]):
        self.condition = condition
        self.probes = dict(probes)
        self._last_t: float | None = None
        self._last_cpu: dict[str, float] = {}

    def start(self, t_s: float) -> None:
        self._last_t = t_s
        self._last_cpu = {role: p.cpu_seconds() for role, p in self.probes.items()}

    def sample(self, t_s: float, minute: int, partial: bool = False, loadavg: float | None = None) -> LoadSample:
        if self._last_t is None:
            raise MetricsError("sampler not started")
        dt = t_s - self._last_t
        cpu = {}
        for role, probe in self.probes.items():
            now_cpu = probe.cpu_seconds()
            frac = (now_cpu - self._last_cpu[role]) / dt if dt > 0 else 0.0
            cpu[role] = min(max(frac, 0.0), 1.0)
            self._last_cpu[role] = now_cpu
        self._last_t = t_s
        relay, sfu = cpu.get("relay", 0.0), cpu.get("sfu", 0.0)
        return LoadSample(minute, loadavg, relay, sfu, home_load(self.condition, cpu), partial)


# -- CSV --------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_bitrate_csv(path: Path, run_id: str, client_id: str, samples: Iterable[BitrateSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BITRATE_COLUMNS)
        for s in samples:
            w.writerow((
                run_id, client_id, _fmt(s.t_window_start_s), s.bytes_sent, s.bytes_received,
                _fmt(s.bits_per_sec_sent), _fmt(s.bits_per_sec_received), s.relay_bytes_sent, s.relay_bytes_received,
            ))


def write_load_csv(path: Path, run_id: str, samples: Iterable[LoadSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOAD_COLUMNS)
        for s in samples:
            w.writerow((
                run_id, s.t_minute_index, _fmt(s.host_loadavg), _fmt(s.cpu_relay), _fmt(s.cpu_sfu),
                _fmt(s.home_load), int(s.partial),
            ))


def read_bitrate_csv(path: Path, window_s: float = WINDOW_S) -> tuple[list[BitrateSample], int]:
    """Parse a bitrate CSV. Rows that fail to parse are skipped and counted."""
    samples, bad = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                samples.append(BitrateSample(
                    float(row["t_start_s"]), window_s, int(row["bytes_sent"]), int(row["bytes_received"]),
                    float(row["bps_sent"]), float(row["bps_received"]),
                    int(row["relay_bytes_sent"]), int(row["relay_bytes_received"]),
                ))
            except (KeyError, TypeError, ValueError):
                bad += 1
    return samples, bad


def read_load_csv(path: Path) -> tuple[list[LoadSample], int]:
    samples, bad = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                la = row["host_loadavg"]
                samples.append(LoadSample(
                    int(row["minute"]), float(la) if la not in ("", None) else None,
                    float(row["cpu_relay"]), float(row["cpu_sfu"]), float(row["home_load"]),
                    row.get("partial", "0") in ("1", "True", "true"),
                ))
            except (KeyError, TypeError, ValueError):
                bad += 1
    return samples, bad


# -- summaries --------------------------------------------------------------


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (N divisor)."""
    if not values:
        raise EmptySeriesError("cannot summarize an empty series")
    return statistics.fmean(values), statistics.pstdev(values)


# keys that may differ between runs that are still comparable
_NON_CONFIG_KEYS = {"condition", "run_id", "seed"}


def comparable_config(config: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in sorted(config.items()) if k not in _NON_CONFIG_KEYS}


@dataclass
class Summary:
    condition: str
    received_mean: float
    received_sd: float
    sent_mean: float
    sent_sd: float
    relay_received_mean: float
    relay_received_sd: float
    relay_sent_mean: float
    relay_sent_sd: float
    home_load_mean: float
    home_load_sd: float
    load_rows: list[dict[str, Any]] = field(default_factory=list)
    n_windows: int = 0
    load_partial_only: bool = False
    loadavg_mean: float | None = None
    run_ids: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Summary":
        return cls(**d)


def summarize(
    bitrate: Sequence[BitrateSample],
    load: Sequence[LoadSample],
    config: Mapping[str, Any],
    run_id: str | None = None,
) -> Summary:
    if not bitrate:
        raise EmptySeriesError("no bitrate windows")
    if not load:
        raise EmptySeriesError("no load samples")
    rx_mean, rx_sd = mean_sd([s.bits_per_sec_received for s in bitrate])
    tx_mean, tx_sd = mean_sd([s.bits_per_sec_sent for s in bitrate])
    rrx_mean, rrx_sd = mean_sd([8 * s.relay_bytes_received / s.window_s for s in bitrate])
    rtx_mean, rtx_sd = mean_sd([8 * s.relay_bytes_sent / s.window_s for s in bitrate])
    complete = [s for s in load if not s.partial]
    used = complete or list(load)
    hl_mean, hl_sd = mean_sd([s.home_load for s in used])
    las = [s.host_loadavg for s in used if s.host_loadavg is not None]
    rows = [
        {
            "minute": s.t_minute_index, "host_loadavg": s.host_loadavg, "cpu_relay": s.cpu_relay,
            "cpu_sfu": s.cpu_sfu, "home_load": s.home_load, "partial": s.partial,
        }
        for s in load
    ]
    return Summary(
        condition=str(config.get("condition")),
        received_mean=rx_mean, received_sd=rx_sd, sent_mean=tx_mean, sent_sd=tx_sd,
        relay_received_mean=rrx_mean, relay_received_sd=rrx_sd,
        relay_sent_mean=rtx_mean, relay_sent_sd=rtx_sd,
        home_load_mean=hl_mean, home_load_sd=hl_sd,
        load_rows=rows, n_windows=len(bitrate), load_partial_only=not complete,
        loadavg_mean=statistics.fmean(las) if las else None,
        run_ids=[run_id] if run_id else [],
        config=dict(config),
    )


_SCALARS = (
    "received_mean", "received_sd", "sent_mean", "sent_sd",
    "relay_received_mean", "relay_received_sd", "relay_sent_mean", "relay_sent_sd",
    "home_load_mean", "home_load_sd",
)


def aggregate(summaries: Sequence[Summary]) -> Summary:
    """Condition-level summary: the median over repetitions of every scalar,
    and per-minute rows holding the median across runs."""
    if not summaries:
        raise EmptySeriesError("no runs to aggregate")
    conds = {s.condition for s in summaries}
    if len(conds) != 1:
        raise ConfigMismatchError(f"cannot aggregate across conditions {sorted(conds)}")
    base = comparable_config(summaries[0].config)
    for s in summaries[1:]:
        if comparable_config(s.config) != base:
            raise ConfigMismatchError("repetitions have different configurations")
    vals = {k: statistics.median([getattr(s, k) for s in summaries]) for k in _SCALARS}
    minutes: dict[int, list[dict[str, Any]]] = {}
    for s in summaries:
        for row in s.load_rows:
            minutes.setdefault(row["minute"], []).append(row)
    rows = []
    for m in sorted(minutes):
        rs = minutes[m]
        las = [r["host_loadavg"] for r in rs if r["host_loadavg"] is not None]
        rows.append({
            "minute": m,
            "host_loadavg": statistics.median(las) if las else None,
            "cpu_relay": statistics.median([r["cpu_relay"] for r in rs]),
            "cpu_sfu": statistics.median([r["cpu_sfu"] for r in rs]),
            "home_load": statistics.median([r["home_load"] for r in rs]),
            "partial": any(r["partial"] for r in rs),
        })
    las = [s.loadavg_mean for s in summaries if s.loadavg_mean is not None]
    return Summary(
        condition=summaries[0].condition, **vals, load_rows=rows,
        n_windows=sum(s.n_windows for s in summaries),
        load_partial_only=all(s.load_partial_only for s in summaries),
        loadavg_mean=statistics.median(las) if las else None,
        run_ids=[r for s in summaries for r in s.run_ids],
        config=dict(summaries[0].config),
    )


# -- comparison -------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    a: float
    b: float
    relation: str  # "lower" | "higher" | "no difference"
    ratio: float | None
    paper_relation: str
    agreement: str  # "agrees" | "disagrees" | "inconclusive"


@dataclass
class Comparison:
    a_condition: str
    b_condition: str
    rows: list[ComparisonRow]

    def row(self, metric: str) -> ComparisonRow:
        for r in self.rows:
            if r.metric == metric:
                return r
        raise KeyError(metric)


def _relation(a: float, b: float) -> str:
    if a == b or math.isclose(a, b, rel_tol=1e-12, abs_tol=0.0):
        return "no difference"
    return "lower" if a < b else "higher"


def compare(a: Summary, b: Summary) -> Comparison:
    """Compare summary ``a`` (normally delegated) against ``b`` (normally
    baseline), flagging whether each direction matches the published one."""
    if comparable_config(a.config) != comparable_config(b.config):
        diff = sorted(
            k for k in set(comparable_config(a.config)) | set(comparable_config(b.config))
            if a.config.get(k) != b.config.get(k)
        )
        raise ConfigMismatchError(f"configs differ beyond condition: {', '.join(diff)}")
    rows = []
    for metric, (paper_a, paper_b) in PAPER_REFERENCE.items():
        va, vb = getattr(a, metric), getattr(b, metric)
        rel = _relation(va, vb)
        paper_rel = _relation(paper_a, paper_b)
        if rel == "no difference":
            agreement = "inconclusive"
        else:
            agreement = "agrees" if rel == paper_rel else "disagrees"
        ratio = va / vb if vb else None
        rows.append(ComparisonRow(metric, va, vb, rel, ratio, paper_rel, agreement))
    return Comparison(a.condition, b.condition, rows)


# -- report rendering --------------------------------------------------------

_ORDINALS = {1: "1st", 2: "2nd", 3: "3rd"}


def _ordinal(n: int) -> str:
    return _ORDINALS.get(n, f"{n}th")


def _num(x: float | None, digits: int = 4) -> str:
    if x is None:
        return "n/a"
    return f"{x:.{digits}f}"


def render_table_i(summaries: Mapping[str, Summary]) -> str:
    conds = list(summaries)
    lines = [
        "| | " + " | ".join(f"*{c}*" for c in conds) + " |",
        "|---|" + "---|" * len(conds),
    ]
    minutes = sorted({r["minute"] for s in summaries.values() for r in s.load_rows})
    for m in minutes:
        cells = []
        label = None
        for c in conds:
            row = next((r for r in summaries[c].load_rows if r["minute"] == m), None)
            cells.append(_num(row["home_load"], 3) if row else "")
            if row and row["partial"]:
                label = f"Home load over final partial interval (minute {m + 1})"
        lines.append(f"| {label or 'Average home load over ' + _ordinal(m + 1) + ' minute'} | " + " | ".join(cells) + " |")
    lines.append("| Average home load over run | " + " | ".join(_num(summaries[c].home_load_mean, 4) for c in conds) + " |")
    lines.append("| SD of home load over each minute | " + " | ".join(_num(summaries[c].home_load_sd, 4) for c in conds) + " |")
    lines.append("| Host 1-min load average (mean) | " + " | ".join(_num(summaries[c].loadavg_mean, 3) for c in conds) + " |")
    return "\n".join(lines)


def render_table_ii(summaries: Mapping[str, Summary]) -> str:
    conds = list(summaries)
    head = "| | " + " | ".join(f"Received *{c}*" for c in conds) + " | " + " | ".join(f"Sent *{c}*" for c in conds) + " |"
    sep = "|---|" + "---|" * (2 * len(conds))
    avg = "| Average | " + " | ".join(_num(summaries[c].received_mean, 3) for c in conds) + " | " + " | ".join(_num(summaries[c].sent_mean, 3) for c in conds) + " |"
    sd = "| SD | " + " | ".join(_num(summaries[c].received_sd, 4) for c in conds) + " | " + " | ".join(_num(summaries[c].sent_sd, 4) for c in conds) + " |"
    ravg = "| Relay-stream average | " + " | ".join(_num(summaries[c].relay_received_mean, 3) for c in conds) + " | " + " | ".join(_num(summaries[c].relay_sent_mean, 3) for c in conds) + " |"
    return "\n".join((head, sep, avg, sd, ravg))


def render_comparison(cmp: Comparison) -> str:
    lines = [
        f"| metric | {cmp.a_condition} | {cmp.b_condition} | {cmp.a_condition} is | ratio | published direction | agreement |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in cmp.rows:
        ratio = "n/a" if r.ratio is None else f"{r.ratio:.3f}"
        lines.append(
            f"| {r.metric} | {r.a:.6g} | {r.b:.6g} | {r.relation} | {ratio} | {r.paper_relation} | {r.agreement} |"
        )
    return "\n".join(lines)
