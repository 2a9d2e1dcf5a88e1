"""Sender-side block device: writes end in the local mempool, a drainer ships
them to peers in arrival order, reads go mempool -> peer -> replica -> disk.
"""

from __future__ import annotations

import logging
import math
import tempfile
from collections import deque
from dataclasses import dataclass, field

from .clock import FG, VirtualClock
from .errors import (
    AddressRangeError,
    BackpressureError,
    CapacityError,
    ConfigError,
    DataLossError,
    MappingError,
    PoolExhausted,
    TransportError,
)
from .mempool import Mempool, PoolConfig, PoolPage
from .placement import Placement
from .radix import RadixTree
from .transport import Transport

log = logging.getLogger(__name__)

KB = 1024
MB = 1024 * KB
GB = 1024 * MB

DISK_OFF = "off"
DISK_ALWAYS = "always"
DISK_ON_FAILURE = "on-remote-failure"


@dataclass
class FaultPolicy:
    replication_factor: int = 1
    disk_backup: str = DISK_OFF

    def __post_init__(self):
        if self.replication_factor < 1:
            raise ConfigError("fault.replication must be >= 1")
        if self.disk_backup not in (DISK_OFF, DISK_ALWAYS, DISK_ON_FAILURE):
            raise ConfigError(f"fault.disk_backup: unknown mode {self.disk_backup!r}")


@dataclass
class DeviceConfig:
    space_bytes: int
    page_size: int = 4096
    block_io_size: int = 64 * KB
    message_size: int = 512 * KB
    queue_entries: int = 1024
    slab_pages: int = GB // 4096
    lazy_send: bool = False
    # False turns the device into the synchronous-send baseline
    critical_path_opt: bool = True

    def __post_init__(self):
        ps = self.page_size
        if self.space_bytes <= 0 or self.space_bytes % ps:
            raise ConfigError("device.space_bytes must be a positive multiple of the page size")
        if self.block_io_size < ps or self.block_io_size % ps:
            raise ConfigError("device.block_io_kb must be a multiple of the page size")
        if self.message_size < ps:
            raise ConfigError("device.message_kb must hold at least one page")
        if self.queue_entries < 1:
            raise ConfigError("device.queue_entries must be >= 1")
        if self.slab_pages < 1:
            raise ConfigError("slab must hold at least one page")

    @property
    def space_pages(self) -> int:
        return self.space_bytes // self.page_size


@dataclass(eq=False)
class TreeEntry:
    """One block-I/O write transaction."""

    sequence_no: int
    base_offset: int
    page_refs: list[PoolPage]
    slabs: frozenset = field(default=frozenset())

    @property
    def addrs(self) -> range:
        return range(self.base_offset, self.base_offset + len(self.page_refs))


class DiskSink:
    """Page-addressed backing file; sparse, so only written pages use space."""

    def __init__(self, page_size: int, path=None):
        self.page_size = page_size
        self._file = open(path, "w+b") if path else tempfile.TemporaryFile()
        self._present: set[int] = set()

    def write(self, addr: int, pages) -> None:
        self._file.seek(addr * self.page_size)
        self._file.write(b"".join(pages))
        self._present.update(range(addr, addr + len(pages)))

    def read(self, addr: int) -> bytes:
        self._file.seek(addr * self.page_size)
        return self._file.read(self.page_size)

    def discard(self, addr: int, n: int) -> None:
        """Forget pages whose disk copy went stale."""
        self._present.difference_update(range(addr, addr + n))

    def has(self, addr: int) -> bool:
        return addr in self._present

    def __len__(self):
        return len(self._present)

    def close(self) -> None:
        self._file.close()


class Device:
    def __init__(
        self,
        config: DeviceConfig,
        pool_config: PoolConfig,
        fault: FaultPolicy,
        transport: Transport,
        placement: Placement,
        clock: VirtualClock,
        disk_path=None,
    ):
        if pool_config.page_size != config.page_size:
            raise ConfigError("mempool and device page sizes differ")
        if placement.slab_pages != config.slab_pages:
            raise ConfigError("placement and device slab sizes differ")
        self.config = config
        self.fault = fault
        self.transport = transport
        self.placement = placement
        self.clock = clock
        self.latency = transport.latency
        self.sender_id = transport.sender_id
        n = config.space_pages
        self.gpt = RadixTree(max(1, (n - 1).bit_length()))
        self.pool = Mempool(pool_config, on_evict=self._forget_page)
        self.staging: deque[TreeEntry] = deque()
        self.reclaimable: deque[TreeEntry] = deque()
        self.remote_ready = bytearray(n)
        self.written = bytearray(n)
        self.disk = DiskSink(config.page_size, disk_path) if fault.disk_backup != DISK_OFF else None
        self.paused_slabs: set[int] = set()
        self.held_writes: dict[int, int] = {}
        self.blocked_hook = None
        self.cluster = None
        self.drain_lane = f"drain:{self.sender_id}"
        self._read_lane = f"read:{self.sender_id}"
        self.disk_lane = f"disk:{self.sender_id}"
        self._seq = 0
        self._zero = bytes(config.page_size)
        self.stats = dict.fromkeys(
            (
                "writes", "reads", "local_hits", "remote_hits", "disk_hits", "zero_fills",
                "stalls", "stall_time", "drain_steps", "drained_entries", "peer_failures",
            ),
            0,
        )

    # helpers

    @property
    def queue_capacity(self) -> int:
        return self.config.queue_entries

    def _slabs_of(self, base: int, n: int) -> frozenset:
        sp = self.config.slab_pages
        return frozenset(range(base // sp, (base + n - 1) // sp + 1))

    def _check_range(self, offset: int, count: int) -> None:
        if count < 1 or offset < 0 or offset + count > self.config.space_pages:
            raise AddressRangeError(
                f"pages [{offset}, {offset + count}) outside device of "
                f"{self.config.space_pages} pages"
            )

    def _forget_page(self, page: PoolPage) -> None:
        if page.addr is not None and self.gpt.get(page.addr) is page:
            self.gpt.delete(page.addr)

    # write path

    def write(self, offset: int, data) -> None:
        """Store whole pages at page address ``offset``; returns once local."""
        ps = self.config.page_size
        n, rem = divmod(len(data), ps)
        if rem or n == 0:
            raise ValueError("write length must be a positive multiple of the page size")
        if len(data) > self.config.block_io_size:
            raise ValueError(
                f"write of {len(data)} bytes exceeds block I/O size {self.config.block_io_size}"
            )
        self._check_range(offset, n)
        view = memoryview(data)
        clock = self.clock
        with clock.op("write"):
            while len(self.staging) >= self.queue_capacity:
                self._stall()
            refs = []
            for i in range(n):
                addr = offset + i
                page = self.gpt.get(addr)
                if page is None:
                    page = self._alloc()
                    page.addr = addr
                    self.gpt.insert(addr, page)
                else:
                    self.pool.touch(page)
                page.data[:] = view[i * ps:(i + 1) * ps]
                self.pool.stage(page)
                refs.append(page)
                self.written[addr] = 1
            clock.charge("copy", n * self.latency.copy_per_page)
            self._seq += 1
            entry = TreeEntry(self._seq, offset, refs, self._slabs_of(offset, n))
            self.staging.append(entry)
            for slab in entry.slabs & self.paused_slabs:
                self.held_writes[slab] = self.held_writes.get(slab, 0) + 1
            self.stats["writes"] += 1
            if not self.config.critical_path_opt:
                # baseline: the request completes only once it is remote
                self._drain_through(entry.sequence_no, lane=FG)

    def _alloc(self) -> PoolPage:
        while True:
            try:
                return self.pool.alloc_page()
            except PoolExhausted:
                self._stall()

    def _stall(self) -> None:
        """Let the drainer free space, charging the wait to the foreground."""
        with self.clock.lane(self.drain_lane):
            progressed = self.drain_step()
        if not progressed:
            if not (self.staging and self.blocked_hook and self.blocked_hook()):
                raise BackpressureError(
                    f"sender {self.sender_id}: write path stalled with "
                    f"{len(self.staging)} staged entries and no progress"
                )
        self.stats["stalls"] += 1
        self.stats["stall_time"] += self.clock.wait_for(self.drain_lane)

    # drainer

    def _blocked(self, entry: TreeEntry) -> bool:
        return bool(self.paused_slabs) and not entry.slabs.isdisjoint(self.paused_slabs)

    def drain_step(self) -> int:
        """Ship the oldest staged entries (coalesced up to one message)."""
        if not self.staging or self._blocked(self.staging[0]):
            return 0
        ps = self.config.page_size
        limit = self.config.message_size
        batch = [self.staging[0]]
        nbytes = len(batch[0].page_refs) * ps
        for entry in list(self.staging)[1:]:
            size = len(entry.page_refs) * ps
            if nbytes + size > limit or self._blocked(entry):
                break
            batch.append(entry)
            nbytes += size
        self._send(batch)
        for entry in batch:
            self.staging.popleft()
            for page in entry.page_refs:
                self.pool.drained(page)
            if len(self.reclaimable) >= self.queue_capacity:
                self.reclaimable.popleft()
            self.reclaimable.append(entry)
        self.stats["drain_steps"] += 1
        self.stats["drained_entries"] += len(batch)
        return len(batch)

    def _send(self, batch) -> None:
        # runs in arrival order; a page repeated in the batch goes once
        sp = self.config.slab_pages
        runs: list[list[int]] = []
        pages: dict[int, PoolPage] = {}
        for entry in batch:
            for addr, page in zip(entry.addrs, entry.page_refs):
                if addr in pages:
                    continue
                pages[addr] = page
                if runs and addr == runs[-1][-1] + 1 and addr % sp:
                    runs[-1].append(addr)
                else:
                    runs.append([addr])
        if self.fault.disk_backup == DISK_ALWAYS:
            # one sequential backup write per batch, in parallel with the network
            with self.clock.lane(self.disk_lane):
                self.clock.charge("disk_write", self.latency.disk_write)
            for run in runs:
                self.disk.write(run[0], [bytes(pages[a].data) for a in run])
        for run in runs:
            data = [bytes(pages[a].data) for a in run]
            self._send_run(run[0], data)

    def _send_run(self, addr: int, data: list[bytes]) -> None:
        slab, offset = divmod(addr, self.config.slab_pages)
        n = len(data)
        for _ in range(len(self.transport.peer_ids) + 1):
            try:
                locations = list(self.placement.ensure_mapped(slab))
            except CapacityError:
                if self.disk is not None:
                    if self.fault.disk_backup != DISK_ALWAYS:
                        self._disk_write(addr, data)
                    return
                raise
            failed = []
            for peer, block in locations:
                try:
                    self.transport.write_pages(peer, block, offset, data)
                except (TransportError, MappingError):
                    failed.append((peer, block))
            if not failed:
                self._mark_remote(addr, n)
                return
            self.stats["peer_failures"] += len(failed)
            survivors = [loc for loc in locations if loc not in failed]
            for loc in failed:
                self.placement.drop(slab, loc)
            if survivors:
                self._mark_remote(addr, n)
                self._repair(slab)
                return
            # every copy of the slab is gone
            self._lose_slab(slab)
            if self.fault.disk_backup == DISK_ON_FAILURE:
                self._disk_write(addr, data)
                return
            if self.fault.disk_backup == DISK_ALWAYS:
                return
        raise CapacityError(f"could not place slab {slab} on any live peer")

    def _mark_remote(self, addr: int, n: int) -> None:
        self.remote_ready[addr:addr + n] = b"\x01" * n
        if self.disk is not None and self.fault.disk_backup != DISK_ALWAYS:
            # an older disk copy must never be mistaken for the latest
            self.disk.discard(addr, n)

    def _repair(self, slab: int) -> None:
        """Restore the replication factor by copying a surviving block."""
        mapping = self.placement.slabs.get(slab)
        if mapping is None:
            return
        while len(mapping.locations) < self.placement.replication:
            src_peer, src_block = mapping.primary
            try:
                peer, block = self.placement.add_replica(slab)
            except CapacityError:
                log.warning("slab %d running with %d copies", slab, len(mapping.locations))
                return
            self.transport.copy_range(src_peer, src_block, peer, block, 0, self.config.slab_pages)

    def _lose_slab(self, slab: int) -> None:
        self.placement.unmap(slab)
        self.forget_remote(slab)

    def forget_remote(self, slab: int) -> None:
        """Clear the remote-ready bits of a slab that no longer has a block."""
        sp = self.config.slab_pages
        start = slab * sp
        end = min(start + sp, self.config.space_pages)
        self.remote_ready[start:end] = bytes(end - start)

    def _disk_write(self, addr: int, data) -> None:
        self.clock.charge("disk_write", self.latency.disk_write)
        self.disk.write(addr, data)

    def on_block_lost(self, peer_id: str, block_id: int) -> None:
        """A peer dropped one of our blocks (baseline eviction or failure)."""
        slab = self.placement.slab_for_block(peer_id, block_id)
        if slab is None:
            return
        self.placement.drop(slab, (peer_id, block_id))
        if self.placement.locations(slab) is None:
            self._lose_slab(slab)

    def on_peer_failed(self, peer_id: str) -> None:
        """Drop every copy held by a dead peer, re-replicating where possible."""
        for slab, mapping in list(self.placement.slabs.items()):
            lost = [loc for loc in mapping.locations if loc[0] == peer_id]
            if not lost:
                continue
            for loc in lost:
                self.placement.drop(slab, loc)
            if self.placement.locations(slab) is None:
                self._lose_slab(slab)
            else:
                with self.clock.lane(self.drain_lane):
                    self._repair(slab)

    def pump(self) -> int:
        """Run the drainer until it catches up with foreground time."""
        if self.config.lazy_send and not self._lazy_should_drain():
            return 0
        drained = 0
        clock = self.clock
        while self.staging and clock.lane_time(self.drain_lane) <= clock.fg:
            with clock.lane(self.drain_lane):
                n = self.drain_step()
            if not n:
                break
            drained += n
        return drained

    def _lazy_should_drain(self) -> bool:
        pool = self.pool
        if len(self.staging) >= self.queue_capacity // 2:
            return True
        can_grow = pool.size < min(pool.config.max_pool_pages, pool.config.cap_pages(pool.host_free_bytes))
        return not can_grow and pool.free_count < pool.size * (1 - pool.config.grow_trigger_ratio)

    def _drain_through(self, seq: int, lane: str | None = None) -> None:
        lane = lane or self.drain_lane
        while self.staging and self.staging[0].sequence_no <= seq:
            if lane == FG:
                n = self.drain_step()
            else:
                with self.clock.lane(lane):
                    n = self.drain_step()
            if not n:
                if self.blocked_hook and self.blocked_hook():
                    continue
                raise BackpressureError("drain blocked by a paused slab")

    def flush(self) -> None:
        """Drain everything staged; every written page then has a durable copy."""
        if self.staging:
            self._drain_through(self.staging[-1].sequence_no)

    def has_staged_for(self, slab: int) -> bool:
        return any(slab in e.slabs for e in self.staging)

    def drain_slab(self, slab: int) -> None:
        """Drain up to the newest staged entry touching ``slab``."""
        last = None
        for entry in self.staging:
            if slab in entry.slabs:
                last = entry.sequence_no
        if last is not None:
            self._drain_through(last)

    def pause_slab(self, slab: int) -> None:
        self.paused_slabs.add(slab)
        self.held_writes[slab] = sum(1 for e in self.staging if slab in e.slabs)

    def resume_slab(self, slab: int) -> int:
        self.paused_slabs.discard(slab)
        return self.held_writes.pop(slab, 0)

    # host memory signal

    def host_signal(self, host_free_bytes: int) -> int:
        """Apply a host free-memory update; returns the resulting pool size."""
        pool = self.pool
        pool.host_free_bytes = host_free_bytes
        if pool.size > pool.shrink_target(host_free_bytes):
            pool.maybe_shrink(host_free_bytes)
            if pool.shrink_shortfall and self.staging:
                # lazy sending is overridden: ship staged pages so they can go
                self.flush()
                pool.maybe_shrink(host_free_bytes)
        return pool.size

    # read path

    def read(self, offset: int, count: int = 1) -> bytes:
        self._check_range(offset, count)
        ps = self.config.page_size
        clock = self.clock
        out: list[bytes | None] = [None] * count
        with clock.op("read"):
            local = 0
            misses = []
            for i in range(count):
                page = self.gpt.get(offset + i)
                if page is not None:
                    out[i] = bytes(page.data)
                    self.pool.touch(page)
                    local += 1
                else:
                    misses.append(offset + i)
            if local:
                clock.charge("copy", local * self.latency.copy_per_page)
                self.stats["local_hits"] += local
            if misses:
                self._read_misses(misses, out, offset)
            self.stats["reads"] += 1
        return b"".join(out) if count > 1 else out[0]

    def _read_misses(self, misses, out, offset) -> None:
        clock = self.clock
        sp = self.config.slab_pages
        remote_runs = []
        disk_pages = []
        for addr in misses:
            if self.remote_ready[addr] and self.placement.locations(addr // sp):
                if remote_runs and addr == remote_runs[-1][-1] + 1 and addr % sp:
                    remote_runs[-1].append(addr)
                else:
                    remote_runs.append([addr])
            elif self.disk is not None and self.disk.has(addr):
                disk_pages.append(addr)
            elif self.written[addr]:
                raise DataLossError(addr)
            else:
                out[addr - offset] = self._zero
                self.stats["zero_fills"] += 1
                self.stats["local_hits"] += 1
        # remote page-ins proceed in parallel; the request waits for the slowest
        slowest = 0
        for run in remote_runs:
            with clock.lane(self._read_lane):
                t0 = clock.lane_time(self._read_lane)
                pages = self._fetch_remote(run)
                slowest = max(slowest, clock.lane_time(self._read_lane) - t0)
            if pages is None:
                disk_pages.extend(run)
                continue
            for addr, page in zip(run, pages):
                out[addr - offset] = page
            self.stats["remote_hits"] += len(run)
        if slowest:
            clock.charge("net_read", slowest)
        for addr in disk_pages:
            if self.disk is None or not self.disk.has(addr):
                raise DataLossError(addr)
            clock.charge("disk_read", self.latency.disk_read)
            out[addr - offset] = self.disk.read(addr)
            self.stats["disk_hits"] += 1

    def _fetch_remote(self, run):
        slab, off = divmod(run[0], self.config.slab_pages)
        for peer, block in list(self.placement.locations(slab) or ()):
            try:
                return self.transport.read_pages(peer, block, off, len(run))
            except (TransportError, MappingError):
                continue
        return None

    # introspection

    def hit_counts(self) -> tuple[int, int, int]:
        s = self.stats
        return s["local_hits"], s["remote_hits"], s["disk_hits"]

    def check(self) -> None:
        """Raise AssertionError on broken engine invariants."""
        self.pool.check()
        seqs = [e.sequence_no for e in self.staging]
        assert seqs == sorted(seqs), "staging out of order"
        assert len(self.staging) <= self.queue_capacity
        assert len(self.reclaimable) <= self.queue_capacity
        for addr, page in self.gpt.items():
            assert page.addr == addr, (addr, page)
            assert page.page_id in self.pool.pages, "GPT points at a released page"
        for entry in self.staging:
            for page in entry.page_refs:
                assert page.pending > 0 and not page.reclaimable_flag, page

    def close(self) -> None:
        if self.disk is not None:
            self.disk.close()


def message_count(nbytes: int, message_size: int) -> int:
    return math.ceil(nbytes / message_size)
