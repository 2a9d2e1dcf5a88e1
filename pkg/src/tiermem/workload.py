"""Synthetic key-value workload with zipfian key popularity."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AddressRangeError, ConfigError

MIXES = {"ETC": 0.95, "SYS": 0.75}
GET, SET = "GET", "SET"


@dataclass
class WorkloadSpec:
    record_count: int
    query_count: int
    value_size_bytes: int = 4096
    zipf_theta: float = 0.99
    mix: str = "ETC"
    get_fraction: float | None = None
    clients: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.record_count < 1 or self.query_count < 0:
            raise ConfigError("workload needs records >= 1 and queries >= 0")
        if self.value_size_bytes < 1:
            raise ConfigError("workload.value_bytes must be positive")
        if self.zipf_theta < 0:
            raise ConfigError("workload.theta must be >= 0")
        if self.clients < 1:
            raise ConfigError("workload.clients must be >= 1")
        mix = self.mix.upper()
        if mix in MIXES:
            self.mix = mix
            if self.get_fraction is None:
                self.get_fraction = MIXES[mix]
        elif mix == "CUSTOM":
            self.mix = mix
            if self.get_fraction is None:
                raise ConfigError("custom mix needs workload.get_percent")
        else:
            raise ConfigError(f"unknown workload mix {self.mix!r}")
        if not 0 <= self.get_fraction <= 1:
            raise ConfigError("GET and SET percentages must sum to 100")

    def pages_per_value(self, page_size: int) -> int:
        return math.ceil(self.value_size_bytes / page_size)


class Zipf:
    """Ranks 1..n drawn with P(r) proportional to 1 / r**theta (exact CDF)."""

    def __init__(self, n: int, theta: float):
        weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** theta
        self.pmf = weights / weights.sum()
        self.cdf = np.cumsum(self.pmf)
        self.cdf[-1] = 1.0
        self.n = n

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        return np.searchsorted(self.cdf, u, side="right") + 1


def value_bytes(key: int, version: int, page_size: int, pages: int) -> bytes:
    """Deterministic, never-all-zero page contents for (key, version)."""
    out = []
    for p in range(pages):
        stamp = struct.pack("<QII", key, version, p + 1)
        out.append(stamp * (page_size // len(stamp)) + stamp[: page_size % len(stamp)])
    return b"".join(out)


@dataclass
class OpRecord:
    client: int
    kind: str
    key: int
    latency: float
    pages: int


@dataclass
class RunLog:
    ops: list = field(default_factory=list)
    write_io_latencies: list = field(default_factory=list)


class Workload:
    """Drives a device with one interleaved stream per client."""

    def __init__(self, spec: WorkloadSpec, device, tick=None):
        self.spec = spec
        self.device = device
        self.tick = tick
        ps = device.config.page_size
        self.page_size = ps
        self.pages = spec.pages_per_value(ps)
        need = spec.record_count * self.pages
        if need > device.config.space_pages:
            raise AddressRangeError(
                f"{spec.record_count} records of {self.pages} pages exceed the "
                f"{device.config.space_pages}-page address space"
            )
        self.zipf = Zipf(spec.record_count, spec.zipf_theta)
        self.versions: dict[int, int] = {}
        self._next_version = 1

    def address(self, key: int) -> int:
        return key * self.pages

    # phases

    def populate(self) -> None:
        for key in range(self.spec.record_count):
            self._set(key, version=0, log=None)
            if self.tick:
                self.tick()

    def op_stream(self, query_count: int | None = None, seed: int | None = None):
        """The deterministic (client, kind, key) sequence, clients interleaved."""
        spec = self.spec
        total = spec.query_count if query_count is None else query_count
        seed = spec.seed if seed is None else seed
        per = [total // spec.clients + (1 if c < total % spec.clients else 0)
               for c in range(spec.clients)]
        streams = []
        for c, n in enumerate(per):
            rng = np.random.default_rng([seed, c])
            keys = self.zipf.sample(rng, n) - 1
            gets = rng.random(n) < spec.get_fraction
            streams.append(list(zip(gets.tolist(), keys.tolist())))
        for i in range(max(per, default=0)):
            for c, stream in enumerate(streams):
                if i < len(stream):
                    is_get, key = stream[i]
                    yield c, GET if is_get else SET, key

    def run(self, query_count: int | None = None, seed: int | None = None, ops=None) -> RunLog:
        """Issue ops (default: the spec's stream) and verify every GET."""
        log = RunLog()
        clock = self.device.clock
        if ops is None:
            ops = self.op_stream(query_count, seed)
        for client, kind, key in ops:
            t0 = clock.fg
            if kind == GET:
                self._get(key)
            else:
                self._set(key, None, log)
            log.ops.append(OpRecord(client, kind, key, clock.fg - t0, self.pages))
            if self.tick:
                self.tick()
        return log

    def _set(self, key: int, version: int | None, log: RunLog | None) -> None:
        if version is None:
            version = self._next_version
            self._next_version += 1
        data = value_bytes(key, version, self.page_size, self.pages)
        step = self.device.config.block_io_size
        base = self.address(key) * self.page_size
        clock = self.device.clock
        for off in range(0, len(data), step):
            t0 = clock.fg
            self.device.write((base + off) // self.page_size, data[off:off + step])
            if log is not None:
                log.write_io_latencies.append(clock.fg - t0)
        self.versions[key] = version

    def _get(self, key: int) -> None:
        got = self.device.read(self.address(key), self.pages)
        if key in self.versions:
            expected = value_bytes(key, self.versions[key], self.page_size, self.pages)
        else:
            expected = bytes(self.pages * self.page_size)
        if got != expected:
            raise AssertionError(f"GET({key}) returned stale or corrupt data")
