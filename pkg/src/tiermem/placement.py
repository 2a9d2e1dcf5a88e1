"""On-demand mapping of address-space slabs to peer memory blocks."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

from .errors import AllocationRefused, CapacityError, MappingError, TransportError
from .transport import Transport

P2C = "p2c"
ROUND_ROBIN = "round_robin"

Location = tuple  # (peer_id, block_id)


@dataclass
class SlabMapping:
    slab_id: int
    locations: list = field(default_factory=list)  # [primary, replica, ...]

    @property
    def primary(self) -> Location:
        return self.locations[0]

    @property
    def peers(self) -> list[str]:
        return [peer for peer, _ in self.locations]


class Placement:
    """Slab map for one sender.

    Peers are ranked in topology order (the order the transport lists them);
    "lower peer id" in tie-breaks means earlier in that order.
    """

    def __init__(
        self,
        transport: Transport,
        slab_pages: int,
        replication: int = 1,
        policy: str = P2C,
        seed: int = 0,
    ):
        if policy not in (P2C, ROUND_ROBIN):
            raise ValueError(f"unknown placement policy {policy!r}")
        if replication < 1:
            raise ValueError("replication factor must be >= 1")
        self.transport = transport
        self.slab_pages = slab_pages
        self.replication = replication
        self.policy = policy
        self.rng = random.Random(seed)
        self.slabs: dict[int, SlabMapping] = {}
        self._by_block: dict[Location, int] = {}
        self._rank = {pid: i for i, pid in enumerate(transport.peer_ids)}
        self._rr = 0
        self.maps = 0

    # address arithmetic

    def split(self, addr: int) -> tuple[int, int]:
        return divmod(addr, self.slab_pages)

    def lookup(self, addr: int) -> tuple[str, int, int]:
        slab, offset = divmod(addr, self.slab_pages)
        mapping = self.slabs.get(slab)
        if mapping is None:
            raise MappingError(f"slab {slab} is not mapped")
        peer, block = mapping.primary
        return peer, block, offset

    def locations(self, slab: int) -> list | None:
        mapping = self.slabs.get(slab)
        return None if mapping is None else mapping.locations

    def slab_for_block(self, peer_id: str, block_id: int) -> int | None:
        return self._by_block.get((peer_id, block_id))

    def block_counts(self) -> Counter:
        counts = Counter({pid: 0 for pid in self.transport.peer_ids})
        for loc in self._by_block:
            counts[loc[0]] += 1
        return counts

    # choosing peers

    def _alive(self, exclude) -> list[str]:
        return [
            pid for pid in self.transport.peer_ids
            if pid not in exclude and not self.transport.is_failed(pid)
        ]

    def choose_peer(self, exclude=()) -> str:
        """Pick a peer with room for one more block, or raise CapacityError."""
        slab_bytes = self.slab_pages * self.transport.page_size
        excluded = set(exclude)
        while True:
            candidates = self._alive(excluded)
            if not candidates:
                raise CapacityError("no peer with a free block")
            if self.policy == ROUND_ROBIN:
                ring = self.transport.peer_ids
                for _ in range(len(ring)):
                    pid = ring[self._rr % len(ring)]
                    self._rr += 1
                    if pid in candidates:
                        break
                if self._free(pid) >= slab_bytes:
                    return pid
                excluded.add(pid)
                continue
            if len(candidates) == 1:
                sampled = candidates
            else:
                sampled = self.rng.sample(candidates, 2)
            scored = []
            for pid in sampled:
                free = self._free(pid)
                if free >= slab_bytes:
                    scored.append((-free, self._rank[pid], pid))
                else:
                    excluded.add(pid)
            if scored:
                return min(scored)[2]

    def _free(self, pid: str) -> int:
        try:
            return self.transport.query_free(pid)
        except TransportError:
            return -1

    # mapping

    def map_slab(self, slab: int) -> Location:
        if slab in self.slabs:
            raise MappingError(f"slab {slab} already mapped")
        if len(self._alive(())) < self.replication:
            raise CapacityError(
                f"{self.replication} copies requested, {len(self._alive(()))} peers alive"
            )
        mapping = SlabMapping(slab)
        try:
            for _ in range(self.replication):
                mapping.locations.append(self.allocate(exclude=mapping.peers))
        except CapacityError:
            for peer, block in mapping.locations:
                self.release_block(peer, block)
            raise
        self.slabs[slab] = mapping
        for loc in mapping.locations:
            self._by_block[loc] = slab
        return mapping.primary

    def allocate(self, exclude=()) -> Location:
        excluded = set(exclude)
        while True:
            pid = self.choose_peer(excluded)
            try:
                block = self.transport.map_block(pid)
            except (AllocationRefused, TransportError):
                excluded.add(pid)
                continue
            self.maps += 1
            return pid, block

    def release_block(self, peer: str, block: int) -> None:
        try:
            self.transport.send_control(peer, {"op": "RELEASE_BLK", "block_id": block})
        except (TransportError, MappingError):
            pass

    def ensure_mapped(self, slab: int) -> list:
        if slab not in self.slabs:
            self.map_slab(slab)
        return self.slabs[slab].locations

    def add_replica(self, slab: int) -> Location:
        mapping = self.slabs[slab]
        loc = self.allocate(exclude=mapping.peers)
        mapping.locations.append(loc)
        self._by_block[loc] = slab
        return loc

    def remap_slab(self, slab: int, old: Location, new: Location) -> None:
        mapping = self.slabs[slab]
        i = mapping.locations.index(tuple(old))
        mapping.locations[i] = tuple(new)
        del self._by_block[tuple(old)]
        self._by_block[tuple(new)] = slab

    def drop(self, slab: int, loc: Location) -> None:
        """Forget one copy of a slab; the slab is unmapped if none remain."""
        mapping = self.slabs.get(slab)
        if mapping is None:
            return
        loc = tuple(loc)
        if loc in mapping.locations:
            mapping.locations.remove(loc)
            self._by_block.pop(loc, None)
        if not mapping.locations:
            del self.slabs[slab]

    def unmap(self, slab: int) -> None:
        mapping = self.slabs.pop(slab, None)
        if mapping:
            for loc in mapping.locations:
                self._by_block.pop(loc, None)
