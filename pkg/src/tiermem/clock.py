"""Deterministic virtual clock with per-lane timelines and a charge trace.

The foreground lane (``"fg"``) is the client-visible critical path. Background
work (drainer, migration copies) runs on named lanes that start no earlier than
the foreground time at which they were scheduled, so background cost never
shows up in request latency unless the foreground explicitly waits (a stall).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import NamedTuple

FG = "fg"

#: Charge kinds that involve the network or the disk.
IO_KINDS = frozenset(
    {"connect", "map_block", "net_write", "net_read", "ctrl", "disk_write", "disk_read"}
)


class Charge(NamedTuple):
    lane: str
    kind: str
    cost: float
    start: float
    op: str | None
    op_id: int


class VirtualClock:
    def __init__(self, trace: bool = True):
        self._time: dict[str, float] = {FG: 0}
        self._lanes = [FG]
        self._op: str | None = None
        self._op_id = 0
        self._next_op_id = 0
        self.trace: list[Charge] | None = [] if trace else None
        self.totals: dict[str, float] = {}
        self.write_path_violations = 0

    @property
    def fg(self) -> float:
        return self._time[FG]

    @property
    def current_lane(self) -> str:
        return self._lanes[-1]

    def now(self) -> float:
        """Latest point reached by any lane."""
        return max(self._time.values())

    def lane_time(self, lane: str) -> float:
        return self._time.get(lane, 0)

    @contextmanager
    def lane(self, name: str):
        # a background task cannot begin before the foreground scheduled it
        self._time[name] = max(self._time.get(name, 0), self._time[FG])
        self._lanes.append(name)
        try:
            yield self
        finally:
            self._lanes.pop()

    @contextmanager
    def op(self, kind: str):
        """Mark a foreground request window (``write``, ``read``...)."""
        outer, outer_id = self._op, self._op_id
        self._next_op_id += 1
        self._op, self._op_id = kind, self._next_op_id
        try:
            yield self._op_id
        finally:
            self._op, self._op_id = outer, outer_id

    def charge(self, kind: str, cost: float) -> None:
        if cost < 0:
            raise ValueError("negative charge")
        lane = self._lanes[-1]
        start = self._time[lane]
        self._time[lane] = start + cost
        self.totals[kind] = self.totals.get(kind, 0) + cost
        if lane == FG and self._op == "write" and kind in IO_KINDS:
            self.write_path_violations += 1
        if self.trace is not None:
            self.trace.append(Charge(lane, kind, cost, start, self._op, self._op_id))

    def wait_for(self, lane: str, kind: str = "stall") -> float:
        """Advance the current lane to ``lane``'s time, charging the gap."""
        gap = self._time.get(lane, 0) - self._time[self._lanes[-1]]
        if gap > 0:
            self.charge(kind, gap)
            return gap
        return 0


def critical_path_violations(trace) -> list[Charge]:
    """Network/disk charges that landed on the foreground inside a write."""
    return [c for c in trace if c.lane == FG and c.op == "write" and c.kind in IO_KINDS]
