from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from pose_sfu.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from pose_sfu.swarm import PARTIAL_MARKER

CMD = [sys.executable, "-m", "pose_sfu"]


def _cli(*args: str, timeout: float = 120, **kw) -> subprocess.CompletedProcess:
    return subprocess.run([*CMD, *args], capture_output=True, text=True, timeout=timeout, **kw)


@pytest.fixture(scope="module")
def runs(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("runs")
    for cond in ("baseline", "delegated"):
        assert main(["swarm", "--transport", "loopback", "--condition", cond, "--clients", "4",
                     "--duration", "30", "--out", str(out)]) == EXIT_OK
    return out


def test_help_lists_commands():
    r = _cli("--help")
    assert r.returncode == 0
    for cmd in ("serve", "swarm", "experiment", "report"):
        assert cmd in r.stdout


def test_missing_command_is_usage_error():
    assert _cli().returncode == EXIT_USAGE


def test_serve_on_occupied_port_exits_2():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        r = _cli("serve", "--listen-ws", "127.0.0.1:0", "--listen-relay", "127.0.0.1:0",
                 "--listen-udp", f"127.0.0.1:{port}", timeout=30)
    assert r.returncode == EXIT_USAGE
    assert "in use" in r.stderr


def test_serve_bad_capacity_exits_2():
    assert _cli("serve", "--capacity", "1").returncode == EXIT_USAGE


def test_serve_ready_then_stats_on_sigterm():
    p = subprocess.Popen([*CMD, "serve", "--listen-ws", "127.0.0.1:0", "--listen-udp", "127.0.0.1:0",
                          "--listen-relay", "127.0.0.1:0"], stdout=subprocess.PIPE, text=True)
    try:
        line = p.stdout.readline()
        assert line.startswith("READY ")
        info = json.loads(line[6:])
        assert info["ws"].startswith("ws://") and info["relay"][1] > 0
        p.send_signal(signal.SIGTERM)
        out, _ = p.communicate(timeout=10)
    finally:
        p.kill()
    assert p.returncode == 0
    assert out.startswith("STATS ")
    assert "sfu" in json.loads(out[6:])


def test_swarm_bad_config_exits_2(tmp_path):
    assert main(["swarm", "--clients", "1", "--transport", "loopback", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["swarm", "--duration", "10", "--transport", "loopback", "--out", str(tmp_path)]) == EXIT_USAGE


def test_experiment_with_one_client_exits_2(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"clients": 1, "duration_s": 30}))
    r = _cli("experiment", str(cfg))
    assert r.returncode == EXIT_USAGE
    assert "clients" in r.stderr


def test_experiment_unknown_key_exits_2(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"clients": 3, "bogus": 1}))
    assert main(["experiment", str(cfg)]) == EXIT_USAGE


def test_report_two_conditions(runs, tmp_path):
    out = tmp_path / "report.md"
    assert main(["report", "--in", str(runs), "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert "## Comparison" in text and "home_load_mean" in text
    assert "baseline" in text and "delegated" in text
    series = (tmp_path / "bitrate_series.dat").read_text()
    assert series.count("# ") >= 3


def test_report_is_byte_identical_on_rerun(runs, tmp_path):
    a, b = tmp_path / "a.md", tmp_path / "b.md"
    main(["report", "--in", str(runs), "--out", str(a)])
    main(["report", "--in", str(runs), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "bitrate_series.dat").exists()


def test_report_single_condition(runs, tmp_path):
    single = tmp_path / "single"
    single.mkdir()
    src = next(p for p in runs.iterdir() if p.name.startswith("baseline"))
    os.symlink(src, single / src.name)
    out = tmp_path / "r.md"
    assert main(["report", "--in", str(single), "--out", str(out)]) == EXIT_OK
    assert "comparison is omitted" in out.read_text()


def test_report_corrupt_row_warns_and_succeeds(runs, tmp_path, capsys):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(runs, copy)
    csv = next(copy.glob("delegated*/bitrate.csv"))
    with open(csv, "a") as fh:
        fh.write("garbage,row\n")
    out = tmp_path / "r.md"
    assert main(["report", "--in", str(copy), "--out", str(out)]) == EXIT_OK
    assert "1 corrupt row" in capsys.readouterr().err
    assert "corrupt CSV row" in out.read_text()


def test_report_missing_dir_exits_2(tmp_path):
    assert main(["report", "--in", str(tmp_path / "nope")]) == EXIT_USAGE


def test_report_empty_dir_exits_1(tmp_path):
    assert main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "r.md")]) == EXIT_FAILURE


@pytest.mark.slow
def test_interrupted_swarm_leaves_partial_marker(tmp_path):
    p = subprocess.Popen([*CMD, "swarm", "--transport", "udp", "--clients", "3", "--duration", "30",
                          "--out", str(tmp_path)], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    time.sleep(4.0)
    p.send_signal(signal.SIGINT)
    _, err = p.communicate(timeout=30)
    assert p.returncode != 0
    markers = list(tmp_path.glob(f"*/{PARTIAL_MARKER}"))
    assert len(markers) == 1
    doc = json.loads((markers[0].parent / "run.json").read_text())
    assert doc["partial"] is True and doc["summary"] is None
