"""Scenario runner, metrics and the built-in trend experiments."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .clock import critical_path_violations
from .cluster import Cluster
from .config import ScenarioConfig, pool_pages_for_fit
from .device import DISK_ALWAYS, DeviceConfig, FaultPolicy
from .errors import TierMemError
from .mempool import PoolConfig
from .remote import DELETE, MIGRATE
from .transport import LatencyModel
from .workload import GET, SET, RunLog, Workload, WorkloadSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAGE = 4096


class InvariantViolation(TierMemError, AssertionError):
    pass


@dataclass
class MetricsReport:
    ops: int = 0
    gets: int = 0
    sets: int = 0
    throughput: float = 0.0
    mean_latency: float = 0.0
    p99_latency: float = 0.0
    completion_time: float = 0.0
    local_hits: int = 0
    remote_hits: int = 0
    disk_hits: int = 0
    migrations: int = 0
    evictions: int = 0
    bytes_moved: int = 0
    mean_write_latency: float = 0.0
    mean_set_latency: float = 0.0
    stall_time: float = 0.0

    @property
    def page_reads(self) -> int:
        return self.local_hits + self.remote_hits + self.disk_hits

    @property
    def local_ratio(self) -> float:
        return self.local_hits / self.page_reads if self.page_reads else 0.0


CSV_COLUMNS = ["schema", "experiment", "variant", "step", "window"] + [
    f.name for f in fields(MetricsReport)
] + ["local_ratio", "ratio"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return "" if value is None else str(value)


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def report_row(experiment, variant, step, window, report: MetricsReport, ratio=None) -> dict:
    row = {"schema": SCHEMA_VERSION, "experiment": experiment, "variant": variant,
           "step": step, "window": window, "local_ratio": report.local_ratio, "ratio": ratio}
    row.update(asdict(report))
    return row


class Probe:
    """Snapshot of the cumulative counters, so a window can be diffed out."""

    def __init__(self, sim: "Simulation"):
        d = sim.device
        self.t = d.clock.fg
        self.hits = d.hit_counts()
        self.stall = d.stats["stall_time"]
        self.migrations = sim.cluster.migrations()
        self.evictions = sim.cluster.evictions
        self.moved = sim.cluster.bytes_moved()

    def report(self, sim: "Simulation", run_log) -> MetricsReport:
        after = Probe(sim)
        lat = np.array([op.latency for op in run_log.ops], dtype=np.float64)
        sets = [op.latency for op in run_log.ops if op.kind == SET]
        elapsed = after.t - self.t
        n = len(run_log.ops)
        return MetricsReport(
            ops=n,
            gets=sum(1 for op in run_log.ops if op.kind == GET),
            sets=len(sets),
            throughput=n * 1e6 / elapsed if elapsed else 0.0,
            mean_latency=float(lat.mean()) if n else 0.0,
            p99_latency=float(np.percentile(lat, 99)) if n else 0.0,
            completion_time=elapsed,
            local_hits=after.hits[0] - self.hits[0],
            remote_hits=after.hits[1] - self.hits[1],
            disk_hits=after.hits[2] - self.hits[2],
            migrations=after.migrations - self.migrations,
            evictions=after.evictions - self.evictions,
            bytes_moved=after.moved - self.moved,
            mean_write_latency=float(np.mean(run_log.write_io_latencies)) if run_log.write_io_latencies else 0.0,
            mean_set_latency=float(np.mean(sets)) if sets else 0.0,
            stall_time=after.stall - self.stall,
        )


class Simulation:
    """One sender, its peers and a workload, built from a scenario."""

    def __init__(self, cfg: ScenarioConfig, trace: bool = True):
        self.cfg = cfg
        dev = cfg.device
        pool = cfg.pool
        if cfg.fit_percent is not None:
            pages = pool_pages_for_fit(cfg.workload, dev.page_size, cfg.fit_percent)
            pool = PoolConfig(pages, pages if cfg.pool_mode == "fixed" else max(pages, pool.max_pool_pages),
                              pool.grow_trigger_ratio, pool.host_free_cap_ratio, pool.page_size, pool.grow_step)
        self.cluster = Cluster(
            [cfg.peer_total_bytes] * cfg.peer_count, dev.slab_pages, dev.page_size,
            cfg.latency, cfg.peer_policy, cfg.watermark_slabs, trace=trace,
        )
        self.device = self.cluster.create_device(
            "sender-0", dev, pool, cfg.fault, cfg.placement_policy, cfg.placement_seed)
        self.workload = Workload(cfg.workload, self.device, tick=self.tick)
        if cfg.host_free_bytes is not None:
            self.device.host_signal(cfg.host_free_bytes)
        self._host = list(cfg.host_schedule)
        self._pressure = {pid: list(s) for pid, s in cfg.pressure.items()}

    def tick(self) -> None:
        now = self.device.clock.fg
        while self._host and self._host[0][0] <= now:
            self.device.host_signal(self._host.pop(0)[1])
        for pid, sched in self._pressure.items():
            while sched and sched[0][0] <= now:
                self.cluster.pressure_tick(pid, sched.pop(0)[1])
        self.cluster.pump()

    def window(self, ops) -> MetricsReport:
        probe = Probe(self)
        run_log = self.workload.run(ops=ops)
        return probe.report(self, run_log)

    def check(self, strict_critical_path: bool = True) -> None:
        """Raise InvariantViolation if the run broke an engine invariant."""
        d = self.device
        try:
            d.check()
        except AssertionError as exc:
            raise InvariantViolation(f"engine state: {exc}") from None
        s = d.stats
        if s["local_hits"] + s["remote_hits"] + s["disk_hits"] < 0:
            raise InvariantViolation("negative hit counters")
        if strict_critical_path and d.config.critical_path_opt:
            bad = critical_path_violations(d.clock.trace or [])
            if bad or d.clock.write_path_violations:
                raise InvariantViolation(f"{len(bad)} network/disk charges inside writes")

    def verify_contents(self) -> None:
        """Every key's latest value must still be readable somewhere."""
        self.cluster.settle()
        wl = self.workload
        for key in range(wl.spec.record_count):
            try:
                wl._get(key)
            except AssertionError as exc:
                raise InvariantViolation(str(exc)) from None


def run_scenario(cfg: ScenarioConfig, out_dir=None, experiment: str = "run") -> tuple[MetricsReport, list[dict]]:
    """Populate, run the workload in ``cfg.windows`` windows, check invariants."""
    started = time.perf_counter()
    sim = Simulation(cfg)
    sim.workload.populate()
    sim.cluster.settle()
    ops = list(sim.workload.op_stream())
    rows = []
    per = -(-len(ops) // cfg.windows) if ops else 0
    total_probe = Probe(sim)
    all_ops = RunLog()
    for w in range(cfg.windows):
        chunk = ops[w * per:(w + 1) * per]
        probe = Probe(sim)
        run_log = sim.workload.run(ops=chunk)
        all_ops.ops += run_log.ops
        all_ops.write_io_latencies += run_log.write_io_latencies
        rows.append(report_row(experiment, cfg.name, 0, w, probe.report(sim, run_log)))
    total = total_probe.report(sim, all_ops)
    sim.check()
    sim.verify_contents()
    if out_dir is not None:
        write_outputs(out_dir, rows, cfg.name, cfg.digest, total, time.perf_counter() - started)
    return total, rows


def write_outputs(out_dir, rows, name, digest, total: MetricsReport | None, wall: float) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(render_csv(rows))
    lines = [f"scenario: {name}", f"config_hash: {digest}", f"csv_schema: {SCHEMA_VERSION}",
             f"rows: {len(rows)}"]
    if total is not None:
        for f in fields(total):
            lines.append(f"{f.name}: {_fmt(getattr(total, f.name))}")
        lines.append(f"local_ratio: {total.local_ratio:.4f}")
    lines.append(f"wall_clock_seconds: {wall:.2f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


# built-in experiments


def base_config(
    records: int,
    queries: int,
    pool_pages: int,
    *,
    mix: str = "ETC",
    value_bytes: int = PAGE,
    slab_pages: int = 64,
    peers: int = 6,
    peer_slabs: int = 8,
    block_io_kb: int = 64,
    disk_backup: str = "off",
    policy: str = MIGRATE,
    critical_path_opt: bool = True,
    seed: int = 0,
    name: str = "scenario",
) -> ScenarioConfig:
    spec = WorkloadSpec(records, queries, value_bytes, 0.99, mix, seed=seed)
    space_pages = records * spec.pages_per_value(PAGE)
    space_pages = -(-space_pages // slab_pages) * slab_pages
    cfg = ScenarioConfig(
        name=name,
        peer_count=peers,
        peer_total_bytes=peer_slabs * slab_pages * PAGE,
        peer_policy=policy,
        device=DeviceConfig(space_pages * PAGE, PAGE, block_io_kb * 1024, 512 * 1024, 1024,
                            slab_pages, critical_path_opt=critical_path_opt),
        pool=PoolConfig(pool_pages, pool_pages),
        pool_mode="fixed",
        fault=FaultPolicy(1, disk_backup),
        placement_seed=seed,
        latency=LatencyModel(),
        workload=spec,
    )
    cfg.digest = config_digest(cfg)
    return cfg


def config_digest(cfg: ScenarioConfig) -> str:
    c = copy.copy(cfg)
    c.digest = ""
    return hashlib.sha256(repr(c).encode()).hexdigest()[:16]


def fit_sweep(seed: int = 0, fits=(100, 75, 50, 25), records: int = 1024, queries: int = 12000) -> list[dict]:
    """Working set fitting fit% of the pool: throughput and write latency."""
    rows = []
    for fit in fits:
        pages = pool_pages_for_fit(WorkloadSpec(records, 1), PAGE, fit)
        cfg = base_config(records, queries, pages, mix="SYS", seed=seed, name=f"fit{fit}")
        rows.append(_single_run("fit_sweep", f"fit{fit}", cfg))
    return rows


def mempool_sweep(seed: int = 0, sizes=(64, 128, 256, 512, 1024), records: int = 1024,
                  queries: int = 12000) -> list[dict]:
    rows = []
    for size in sizes:
        cfg = base_config(records, queries, size, mix="ETC", seed=seed, name=f"pool{size}")
        rows.append(_single_run("mempool_sweep", f"pool{size}", cfg))
    return rows


def blocksize_sweep(seed: int = 0, sizes_kb=(128, 64, 32), records: int = 128,
                    queries: int = 3000) -> list[dict]:
    rows = []
    for kb in sizes_kb:
        cfg = base_config(records, queries, 1024, mix="SYS", value_bytes=128 * 1024,
                          peer_slabs=16, block_io_kb=kb, seed=seed, name=f"bio{kb}k")
        rows.append(_single_run("blocksize_sweep", f"bio{kb}k", cfg))
    return rows


def local_remote_ratio(seed: int = 0, fits=(100, 50, 25), records: int = 1024,
                       queries: int = 8000) -> list[dict]:
    """Write latency as the local:remote split changes, engine vs synchronous baseline."""
    rows = []
    for variant, opt in (("optimized", True), ("baseline", False)):
        for fit in fits:
            pages = pool_pages_for_fit(WorkloadSpec(records, 1), PAGE, fit)
            cfg = base_config(records, queries, pages, mix="SYS", critical_path_opt=opt,
                              seed=seed, name=f"{variant}-fit{fit}")
            rows.append(_single_run("local_remote_ratio", f"{variant}-fit{fit}", cfg, step=fit))
    return rows


def _single_run(experiment, variant, cfg, step=0) -> dict:
    sim = Simulation(cfg)
    sim.workload.populate()
    sim.cluster.settle()
    report = sim.window(list(sim.workload.op_stream()))
    sim.check()
    sim.verify_contents()
    return report_row(experiment, variant, step, 0, report)


def eviction_vs_migration(seed: int = 0, records: int = 1152, queries: int = 4000,
                          pool_pages: int = 128) -> list[dict]:
    """Evict one peer's blocks one at a time under both peer policies.

    Every measurement window replays the same op stream; ``ratio`` is the
    window's throughput over the pre-eviction window.
    """
    rows = []
    for policy in (DELETE, MIGRATE):
        cfg = base_config(records, queries, pool_pages, mix="SYS", disk_backup=DISK_ALWAYS,
                          policy=policy, seed=seed, name=policy)
        sim = Simulation(cfg)
        sim.workload.populate()
        sim.cluster.settle()
        wl = sim.workload
        sim.window(list(wl.op_stream(seed=seed + 1)))  # warm-up
        ops = list(wl.op_stream(seed=seed))
        base = sim.window(ops)
        rows.append(report_row("eviction_vs_migration", policy, 0, 0, base, 1.0))
        victim = sim.cluster.peer("peer-0")
        slab_bytes = cfg.device.slab_pages * PAGE
        steps = len(victim.blocks)
        for step in range(1, steps + 1):
            if not victim.blocks:
                break
            before = Probe(sim)
            usage = victim.total_bytes - len(victim.blocks) * slab_bytes
            sim.cluster.pressure_tick("peer-0", usage)
            sim.cluster.settle()
            report = sim.window(ops)
            # count the eviction handled between windows too
            report.evictions = sim.cluster.evictions - before.evictions
            report.migrations = sim.cluster.migrations() - before.migrations
            report.bytes_moved = sim.cluster.bytes_moved() - before.moved
            ratio = report.throughput / base.throughput
            rows.append(report_row("eviction_vs_migration", policy, step, 0, report, ratio))
        sim.check()
        sim.verify_contents()
    return rows


EXPERIMENTS = {
    "fit_sweep": fit_sweep,
    "mempool_sweep": mempool_sweep,
    "eviction_vs_migration": eviction_vs_migration,
    "blocksize_sweep": blocksize_sweep,
    "local_remote_ratio": local_remote_ratio,
}


def run_experiment(name: str, seed: int = 0, out_dir=None) -> list[dict]:
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}") from None
    started = time.perf_counter()
    rows = fn(seed=seed)
    if out_dir is not None:
        digest = hashlib.sha256(f"{name}:{seed}:{SCHEMA_VERSION}".encode()).hexdigest()[:16]
        write_outputs(out_dir, rows, name, digest, None, time.perf_counter() - started)
        _append_table(Path(out_dir) / "summary.txt", rows)
    return rows


def _append_table(path: Path, rows: list[dict]) -> None:
    cols = ["variant", "step", "throughput", "mean_latency", "p99_latency",
            "mean_write_latency", "local_ratio", "ratio"]
    lines = ["", "  ".join(f"{c:>18}" for c in cols)]
    for row in rows:
        lines.append("  ".join(f"{_fmt(row.get(c)):>18}" for c in cols))
    with open(path, "a") as fh:
        fh.write("\n".join(lines) + "\n")
