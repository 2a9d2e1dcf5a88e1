"""Host-coordinated dynamic page pool.

Pre-allocated pages are handed out first. The pool grows when usage crosses a
trigger ratio (bounded by ``max_pool_pages`` and a share of host free memory),
shrinks when host free memory drops, and otherwise recycles the least recently
used page whose contents already live on a remote peer or on disk.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError, PoolExhausted


@dataclass
class PoolConfig:
    min_pool_pages: int
    max_pool_pages: int
    grow_trigger_ratio: float = 0.80
    host_free_cap_ratio: float = 0.50
    page_size: int = 4096
    grow_step: float = 0.25

    def __post_init__(self):
        if not 0 < self.min_pool_pages <= self.max_pool_pages:
            raise ConfigError("need 0 < mempool.min_pages <= mempool.max_pages")
        if not 0 < self.grow_trigger_ratio < 1:
            raise ConfigError("mempool.grow_trigger must be in (0, 1)")
        if not 0 < self.host_free_cap_ratio <= 1:
            raise ConfigError("mempool.host_free_cap must be in (0, 1]")
        if self.page_size <= 0:
            raise ConfigError("page size must be positive")
        if self.grow_step <= 0:
            raise ConfigError("mempool.grow_step must be positive")

    def cap_pages(self, host_free_bytes: int | None) -> float:
        """Largest pool size the host's free memory allows (inf when unknown)."""
        if host_free_bytes is None:
            return math.inf
        return math.floor(self.host_free_cap_ratio * host_free_bytes / self.page_size)


@dataclass(eq=False)
class PoolPage:
    page_id: int
    data: bytearray
    addr: int | None = None
    update_flag: bool = False
    reclaimable_flag: bool = False
    lru_stamp: int = 0
    # staged entries still referencing this slot
    pending: int = 0
    # has been part of a write transaction since it was handed out
    tracked: bool = field(default=False, repr=False)

    def __repr__(self):
        return (
            f"PoolPage({self.page_id}, addr={self.addr}, upd={self.update_flag}, "
            f"recl={self.reclaimable_flag}, stamp={self.lru_stamp}, pending={self.pending})"
        )


class Mempool:
    def __init__(self, config: PoolConfig, on_evict=None):
        self.config = config
        self.on_evict = on_evict
        self.pages: dict[int, PoolPage] = {}
        self._free: deque[int] = deque()
        self._lru: list[tuple[int, int]] = []
        self._stamp = 0
        self._next_id = 0
        self.host_free_bytes: int | None = None
        self.shrink_shortfall = 0
        self.stats = {"grows": 0, "shrinks": 0, "reclaimed": 0, "released": 0}
        self._add_pages(config.min_pool_pages)

    @property
    def size(self) -> int:
        return len(self.pages)

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def used(self) -> int:
        return len(self.pages) - len(self._free)

    def _add_pages(self, n: int) -> None:
        ps = self.config.page_size
        for _ in range(n):
            pid = self._next_id
            self._next_id += 1
            self.pages[pid] = PoolPage(pid, bytearray(ps))
            self._free.append(pid)

    # access ordering

    def touch(self, page: PoolPage) -> None:
        self._stamp += 1
        page.lru_stamp = self._stamp
        if page.reclaimable_flag:
            heapq.heappush(self._lru, (self._stamp, page.page_id))

    # flag transitions driven by the sender engine

    def stage(self, page: PoolPage) -> None:
        """``page`` joined a new write transaction."""
        if page.tracked:
            page.update_flag = True
        page.tracked = True
        page.pending += 1
        page.reclaimable_flag = False

    def drained(self, page: PoolPage) -> None:
        """A transaction referencing ``page`` reached a remote (or disk) copy."""
        if page.pending <= 0:
            raise AssertionError(f"drain of unstaged page {page!r}")
        page.pending -= 1
        if page.pending == 0:
            page.update_flag = False
            page.reclaimable_flag = True
            heapq.heappush(self._lru, (page.lru_stamp, page.page_id))
            if len(self._lru) > 4 * len(self.pages) + 64:
                self._compact_lru()

    def _compact_lru(self) -> None:
        self._lru = [
            (p.lru_stamp, p.page_id)
            for p in self.pages.values()
            if p.reclaimable_flag and p.addr is not None
        ]
        heapq.heapify(self._lru)

    # allocation

    def alloc_page(self, host_free_bytes: int | None = None) -> PoolPage:
        if host_free_bytes is not None:
            self.host_free_bytes = host_free_bytes
        if self.used >= self.config.grow_trigger_ratio * self.size:
            self.maybe_grow()
        if not self._free:
            self.reclaim_lru(1)
        if not self._free:
            raise PoolExhausted(
                f"mempool: {self.size} pages, none free or reclaimable"
            )
        page = self.pages[self._free.popleft()]
        page.update_flag = page.reclaimable_flag = page.tracked = False
        page.pending = 0
        self.touch(page)
        return page

    def maybe_grow(self, host_free_bytes: int | None = None) -> int:
        if host_free_bytes is not None:
            self.host_free_bytes = host_free_bytes
        size = self.size
        if self.used < self.config.grow_trigger_ratio * size:
            return size
        limit = min(self.config.max_pool_pages, self.config.cap_pages(self.host_free_bytes))
        step = max(1, math.ceil(size * self.config.grow_step))
        new_size = int(min(limit, size + step))
        if new_size <= size:
            return size
        self._add_pages(new_size - size)
        self.stats["grows"] += 1
        return new_size

    def shrink_target(self, host_free_bytes: int | None = None) -> int:
        if host_free_bytes is None:
            host_free_bytes = self.host_free_bytes
        cap = self.config.cap_pages(host_free_bytes)
        return int(max(self.config.min_pool_pages, min(self.config.max_pool_pages, self.size, cap)))

    def maybe_shrink(self, host_free_bytes: int) -> int:
        """Release free then reclaimable pages down to what the host allows.

        Staged pages cannot be released; whatever is left over is recorded in
        ``shrink_shortfall`` so the owner can drain and call again.
        """
        self.host_free_bytes = host_free_bytes
        demand = self.size - self.shrink_target(host_free_bytes)
        if demand <= 0:
            self.shrink_shortfall = 0
            return self.size
        released = 0
        while self._free and released < demand:
            del self.pages[self._free.pop()]
            released += 1
        if released < demand:
            for page in self._take_lru(demand - released):
                del self.pages[page.page_id]
                released += 1
        self.shrink_shortfall = demand - released
        if released:
            self.stats["shrinks"] += 1
            self.stats["released"] += released
        return self.size

    def reclaim_lru(self, n: int) -> list[PoolPage]:
        """Recycle up to ``n`` reclaimable pages, oldest access first."""
        if n < 1:
            raise ValueError("n must be >= 1")
        pages = self._take_lru(n)
        self._free.extend(p.page_id for p in pages)
        return pages

    def _take_lru(self, n: int) -> list[PoolPage]:
        out = []
        heap = self._lru
        while heap and len(out) < n:
            stamp, pid = heapq.heappop(heap)
            page = self.pages.get(pid)
            if page is None or page.addr is None or page.lru_stamp != stamp:
                continue
            if page.update_flag or not page.reclaimable_flag:
                continue
            if self.on_evict is not None:
                self.on_evict(page)
            page.addr = None
            page.reclaimable_flag = page.update_flag = page.tracked = False
            out.append(page)
        self.stats["reclaimed"] += len(out)
        return out

    def reclaimable_count(self) -> int:
        return sum(
            1 for p in self.pages.values()
            if p.addr is not None and p.reclaimable_flag and not p.update_flag
        )

    def check(self) -> None:
        """Raise AssertionError if the bookkeeping is inconsistent."""
        cfg = self.config
        assert cfg.min_pool_pages <= self.size <= cfg.max_pool_pages, self.size
        free = set(self._free)
        assert len(free) == len(self._free), "page on the free list twice"
        assert free <= set(self.pages), "free list references a released page"
        in_use = {pid for pid, p in self.pages.items() if p.addr is not None}
        assert not (free & in_use), "free page still mapped"
        assert len(free) + len(in_use) == self.size, "page leak"
        for p in self.pages.values():
            assert not (p.update_flag and p.reclaimable_flag), p
