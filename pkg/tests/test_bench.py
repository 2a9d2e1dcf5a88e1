import csv
import io
from pathlib import Path

import pytest

from tiermem.bench import (
    CSV_COLUMNS, EXPERIMENTS, InvariantViolation, Simulation, base_config, render_csv,
    run_experiment, run_scenario,
)
from tiermem.cli import main
from tiermem.config import load_config

DEMO = Path(__file__).resolve().parents[1] / "scenarios" / "demo.ini"


def test_scenario_outputs(tmp_path):
    cfg = load_config(DEMO)
    report, rows = run_scenario(cfg, tmp_path)
    assert len(rows) == cfg.windows
    assert report.ops == cfg.workload.query_count
    assert report.page_reads == report.gets  # one page per value
    assert report.migrations >= 1
    text = (tmp_path / "metrics.csv").read_text()
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == CSV_COLUMNS
    assert {r["schema"] for r in parsed} == {"1"}
    summary = (tmp_path / "summary.txt").read_text()
    assert f"config_hash: {cfg.digest}" in summary and "wall_clock_seconds" in summary


def test_scenario_csv_is_byte_identical(tmp_path):
    cfg = load_config(DEMO)
    run_scenario(cfg, tmp_path / "a")
    run_scenario(load_config(DEMO), tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_hits_add_up_to_page_reads():
    cfg = base_config(256, 2000, 32, mix="SYS")
    sim = Simulation(cfg)
    sim.workload.populate()
    report = sim.window(list(sim.workload.op_stream()))
    assert report.local_hits + report.remote_hits + report.disk_hits == report.gets


def test_conservation_at_quiescence():
    """Client bytes all live in mempool, peers or disk once settled."""
    cfg = base_config(256, 2000, 32, mix="SYS")
    sim = Simulation(cfg)
    sim.workload.populate()
    sim.workload.run()
    sim.cluster.settle()
    d = sim.device
    for key in range(256):
        local = d.gpt.get(key)
        if local is None:
            slab, off = divmod(key, d.config.slab_pages)
            peer, block = d.placement.slabs[slab].primary
            data = sim.cluster.peers[peer].read_pages(block, off, 1)[0]
        else:
            data = bytes(local.data)
        assert sim.workload.versions[key] == int.from_bytes(data[8:12], "little")


def test_invariant_violation_detected():
    cfg = base_config(64, 100, 16)
    sim = Simulation(cfg)
    sim.workload.populate()
    sim.device.clock.write_path_violations = 1
    with pytest.raises(InvariantViolation):
        sim.check()


def test_render_csv_blank_for_missing():
    text = render_csv([{"schema": 1, "ratio": None, "throughput": 2.0}])
    row = text.splitlines()[1].split(",")
    assert row[0] == "1" and row[-1] == "" and "2.000000" in row


def test_unknown_experiment():
    with pytest.raises(ValueError):
        run_experiment("nope")


def test_cli_run_and_experiment(tmp_path, capsys):
    assert main(["run", str(DEMO), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert main(["experiment", "blocksize_sweep", "--seed", "2", "--out", str(tmp_path / "exp")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "exp" / "metrics.csv")))
    assert [r["variant"] for r in rows] == ["bio128k", "bio64k", "bio32k"]
    assert main(["list"]) == 0
    assert set(capsys.readouterr().out.split()) >= set(EXPERIMENTS)


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[device]\nspace_bytes = x\n")
    assert main(["run", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_cli_invariant_exit_code(monkeypatch, tmp_path):
    import tiermem.cli as cli

    def broken(*a, **k):
        raise InvariantViolation("forced")

    monkeypatch.setattr(cli, "run_scenario", broken)
    assert cli.main(["run", str(DEMO), "--out", str(tmp_path)]) != 0
