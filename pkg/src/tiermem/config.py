"""Scenario files: flat ``key = value`` entries grouped in ``[section]`` headers.

Errors name the offending line. Schedules are CSV files of ``time,bytes``
rows, where time is on the sender's simulated clock.
"""

from __future__ import annotations

import configparser
import copy
import csv
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .device import DISK_ALWAYS, DISK_OFF, DISK_ON_FAILURE, DeviceConfig, FaultPolicy
from .errors import ConfigError
from .mempool import PoolConfig
from .placement import P2C, ROUND_ROBIN
from .remote import DELETE, MIGRATE
from .transport import LatencyModel
from .workload import WorkloadSpec

KB = 1024
MB = 1024 * KB

# section -> key -> converter
SCHEMA = {
    "peers": {
        "count": int, "total_mb": float, "eviction_watermark_slabs": float, "policy": str,
    },
    "device": {
        "space_bytes": int, "block_io_kb": int, "message_kb": int, "queue_entries": int,
        "page_size": int, "lazy_send": "bool", "critical_path_opt": "bool",
    },
    "mempool": {
        "min_pages": int, "max_pages": int, "grow_trigger": float, "host_free_cap": float,
        "grow_step": float, "mode": str,
    },
    "fault": {"replication": int, "disk_backup": str},
    "placement": {"policy": str, "slab_mb": float, "seed": int},
    "latency": {
        "copy_per_page": float, "net_write": float, "net_read": float, "connect": float,
        "map_block": float, "disk_write": float, "disk_read": float,
    },
    "workload": {
        "records": int, "queries": int, "value_bytes": int, "theta": float, "mix": str,
        "get_percent": float, "clients": int, "seed": int,
    },
    "host": {"free_bytes": int, "free_schedule": "path"},
    "pressure": {},  # peer-id = schedule path
    "run": {"windows": int, "fit_percent": float, "name": str},
}


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    peer_count: int = 6
    peer_total_bytes: int = 4 * MB
    watermark_slabs: float = 1
    peer_policy: str = MIGRATE
    device: DeviceConfig = None
    pool: PoolConfig = None
    pool_mode: str = "dynamic"
    fault: FaultPolicy = field(default_factory=FaultPolicy)
    placement_policy: str = P2C
    placement_seed: int = 0
    latency: LatencyModel = field(default_factory=LatencyModel)
    workload: WorkloadSpec = None
    host_free_bytes: int | None = None
    host_schedule: list = field(default_factory=list)
    pressure: dict = field(default_factory=dict)
    windows: int = 1
    fit_percent: float | None = None
    digest: str = ""

    def with_pool(self, pages: int) -> "ScenarioConfig":
        """Copy with a fixed-size pool of ``pages`` pages."""
        cfg = copy.copy(self)
        cfg.pool = PoolConfig(
            pages, pages, self.pool.grow_trigger_ratio, self.pool.host_free_cap_ratio,
            self.pool.page_size, self.pool.grow_step,
        )
        cfg.pool_mode = "fixed"
        return cfg


def _line_index(text: str) -> dict:
    """(section, key) -> line number, plus (section, None) for headers."""
    index = {}
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index.setdefault((section, None), n)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        index[(section, key)] = n
    return index


def _convert(raw: str, kind, where: str, base: Path | None):
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "path":
            path = Path(raw.strip())
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.is_file():
                raise ConfigError(f"{where}: file {str(path)!r} does not exist")
            return path
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        return kind(raw.strip())
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def read_schedule(path: Path) -> list[tuple[float, int]]:
    """``time,bytes`` rows (a header row is allowed), sorted by time."""
    rows = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                t, value = float(row[0]), int(float(row[1]))
            except (ValueError, IndexError):
                if n == 1:
                    continue
                raise ConfigError(f"{path}: bad schedule row {row!r}", n) from None
            if value < 0:
                raise ConfigError(f"{path}: negative memory figure", n)
            rows.append((t, value))
    return sorted(rows)


def parse_config(text: str, base_dir=None) -> ScenarioConfig:
    base = Path(base_dir) if base_dir is not None else None
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line) from None

    values: dict[str, dict] = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((sec, None)))
        out = values.setdefault(sec, {})
        for key, raw in parser.items(section):
            line = lines.get((sec, key))
            where = f"{sec}.{key}"
            if sec == "pressure":
                kind = "path"
            elif key in SCHEMA[sec]:
                kind = SCHEMA[sec][key]
            else:
                raise ConfigError(f"unknown key {where}", line)
            try:
                out[key] = (_convert(raw, kind, where, base), line)
            except ConfigError as exc:
                raise ConfigError(str(exc), line) from None

    def get(sec, key, default=None):
        return values.get(sec, {}).get(key, (default, None))[0]

    def line_of(sec, key=None):
        return values.get(sec, {}).get(key, (None, lines.get((sec, None))))[1]

    def build(sec, fn):
        try:
            return fn()
        except ConfigError as exc:
            m = re.search(r"\b(\w+)\.(\w+)\b", str(exc))
            line = None
            if m and m.group(1) in values:
                line = line_of(m.group(1), m.group(2))
            raise ConfigError(str(exc), line or lines.get((sec, None))) from None
        except TypeError as exc:
            raise ConfigError(f"[{sec}] {exc}", lines.get((sec, None))) from None

    cfg = ScenarioConfig()
    cfg.name = get("run", "name", "scenario")
    cfg.windows = get("run", "windows", 1)
    if cfg.windows < 1:
        raise ConfigError("run.windows must be >= 1", line_of("run", "windows"))
    cfg.fit_percent = get("run", "fit_percent")
    if cfg.fit_percent is not None and not 0 < cfg.fit_percent <= 100:
        raise ConfigError("run.fit_percent must be in (0, 100]", line_of("run", "fit_percent"))

    cfg.latency = build("latency", lambda: LatencyModel.from_dict(
        {k: v for k, (v, _) in values.get("latency", {}).items()}))

    page_size = get("device", "page_size", 4096)
    slab_mb = get("placement", "slab_mb", 1024)
    slab_pages = int(round(slab_mb * MB / page_size))
    if slab_pages < 1:
        raise ConfigError("placement.slab_mb is smaller than a page", line_of("placement", "slab_mb"))

    cfg.peer_count = get("peers", "count", 6)
    if cfg.peer_count < 1:
        raise ConfigError("peers.count must be >= 1", line_of("peers", "count"))
    cfg.peer_total_bytes = int(get("peers", "total_mb", 4 * slab_mb) * MB)
    cfg.watermark_slabs = get("peers", "eviction_watermark_slabs", 1)
    cfg.peer_policy = get("peers", "policy", MIGRATE)
    if cfg.peer_policy not in (MIGRATE, DELETE):
        raise ConfigError(f"peers.policy must be {MIGRATE} or {DELETE}", line_of("peers", "policy"))

    space = get("device", "space_bytes")
    if space is None:
        raise ConfigError("device.space_bytes is required", lines.get(("device", None)))
    cfg.device = build("device", lambda: DeviceConfig(
        space_bytes=space,
        page_size=page_size,
        block_io_size=get("device", "block_io_kb", 64) * KB,
        message_size=get("device", "message_kb", 512) * KB,
        queue_entries=get("device", "queue_entries", 1024),
        slab_pages=slab_pages,
        lazy_send=get("device", "lazy_send", False),
        critical_path_opt=get("device", "critical_path_opt", True),
    ))

    cfg.pool_mode = get("mempool", "mode", "dynamic")
    if cfg.pool_mode not in ("fixed", "dynamic"):
        raise ConfigError("mempool.mode must be fixed or dynamic", line_of("mempool", "mode"))
    min_pages = get("mempool", "min_pages", 256)
    max_pages = get("mempool", "max_pages", min_pages if cfg.pool_mode == "fixed" else 4 * min_pages)
    if cfg.pool_mode == "fixed":
        min_pages = max_pages
    cfg.pool = build("mempool", lambda: PoolConfig(
        min_pages, max_pages,
        grow_trigger_ratio=get("mempool", "grow_trigger", 0.80),
        host_free_cap_ratio=get("mempool", "host_free_cap", 0.50),
        page_size=page_size,
        grow_step=get("mempool", "grow_step", 0.25),
    ))

    disk = get("fault", "disk_backup", DISK_OFF)
    if disk not in (DISK_OFF, DISK_ALWAYS, DISK_ON_FAILURE):
        raise ConfigError(f"fault.disk_backup: unknown mode {disk!r}", line_of("fault", "disk_backup"))
    cfg.fault = build("fault", lambda: FaultPolicy(get("fault", "replication", 1), disk))
    if cfg.fault.replication_factor > cfg.peer_count:
        raise ConfigError("fault.replication exceeds peers.count", line_of("fault", "replication"))

    cfg.placement_policy = get("placement", "policy", P2C)
    if cfg.placement_policy not in (P2C, ROUND_ROBIN):
        raise ConfigError("placement.policy must be p2c or round_robin", line_of("placement", "policy"))
    cfg.placement_seed = get("placement", "seed", 0)

    if "workload" not in values:
        raise ConfigError("missing [workload] section")
    get_pct = get("workload", "get_percent")
    cfg.workload = build("workload", lambda: WorkloadSpec(
        record_count=get("workload", "records", 1000),
        query_count=get("workload", "queries", 10000),
        value_size_bytes=get("workload", "value_bytes", page_size),
        zipf_theta=get("workload", "theta", 0.99),
        mix=get("workload", "mix", "ETC"),
        get_fraction=None if get_pct is None else get_pct / 100,
        clients=get("workload", "clients", 1),
        seed=get("workload", "seed", 0),
    ))
    need = cfg.workload.record_count * cfg.workload.pages_per_value(page_size)
    if need > cfg.device.space_pages:
        raise ConfigError("workload.records do not fit device.space_bytes", line_of("workload", "records"))

    cfg.host_free_bytes = get("host", "free_bytes")
    sched = get("host", "free_schedule")
    if sched is not None:
        cfg.host_schedule = read_schedule(sched)
    for key, (path, line) in values.get("pressure", {}).items():
        try:
            idx = int(key.rsplit("-", 1)[-1])
        except ValueError:
            raise ConfigError(f"pressure key {key!r} is not a peer id", line) from None
        if not 0 <= idx < cfg.peer_count:
            raise ConfigError(f"pressure schedule for unknown peer {key!r}", line)
        cfg.pressure[f"peer-{idx}"] = read_schedule(path)

    cfg.digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    cfg = parse_config(text, base_dir=path.parent)
    # schedules are part of the provenance too
    h = hashlib.sha256(text.encode())
    for p in sorted(_schedule_paths(text, path.parent)):
        h.update(Path(p).read_bytes())
    cfg.digest = h.hexdigest()[:16]
    return cfg


def _schedule_paths(text: str, base: Path) -> list[str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    out = []
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section.lower() == "pressure" or key == "free_schedule":
                p = Path(raw.strip())
                out.append(str(p if p.is_absolute() else base / p))
    return out


def pool_pages_for_fit(spec: WorkloadSpec, page_size: int, fit_percent: float) -> int:
    working_set = spec.record_count * spec.pages_per_value(page_size)
    return max(1, math.ceil(working_set * fit_percent / 100))
