"""Peer node: a pool of unit-sized memory blocks donated to senders.

Blocks are sparse (only written pages are materialized) but are accounted at
their full slab size against the peer's memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import AllocationRefused, MappingError, TopologyError

MIGRATE = "migrate"
DELETE = "delete"


@dataclass
class ActivityTag:
    last_write_time: float = 0

    def touch(self, t: float) -> None:
        if t > self.last_write_time:
            self.last_write_time = t


@dataclass
class MRBlock:
    block_id: int
    owner_sender_id: str
    tag: ActivityTag
    data: dict[int, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class EvictionNotice:
    """What a pressure tick asks of a block's owner.

    ``kind`` is ``"evict"`` (owner should migrate the block away) or
    ``"deleted"`` (baseline policy, the block is already gone).
    """

    peer_id: str
    block_id: int
    owner: str
    kind: str


class PeerNode:
    def __init__(
        self,
        peer_id: str,
        total_bytes: int,
        slab_pages: int,
        page_size: int = 4096,
        watermark_bytes: int | None = None,
        policy: str = MIGRATE,
    ):
        if policy not in (MIGRATE, DELETE):
            raise ValueError(f"unknown peer policy {policy!r}")
        self.peer_id = peer_id
        self.total_bytes = total_bytes
        self.slab_pages = slab_pages
        self.page_size = page_size
        self.watermark_bytes = self.slab_bytes if watermark_bytes is None else watermark_bytes
        self.policy = policy
        self.native_app_usage = 0
        self.blocks: dict[int, MRBlock] = {}
        self.failed = False
        self.evicting: int | None = None
        self._next_block_id = 0
        self._zero = bytes(page_size)

    @property
    def slab_bytes(self) -> int:
        return self.slab_pages * self.page_size

    @property
    def block_bytes(self) -> int:
        return len(self.blocks) * self.slab_bytes

    @property
    def free_bytes(self) -> int:
        return max(0, self.total_bytes - self.native_app_usage - self.block_bytes)

    def __repr__(self):
        return f"PeerNode({self.peer_id!r}, blocks={len(self.blocks)}, free={self.free_bytes})"

    # block pool

    def allocate_block(self, sender_id: str, now: float = 0) -> int:
        if self.free_bytes < self.slab_bytes:
            raise AllocationRefused(
                f"peer {self.peer_id}: {self.free_bytes} free < slab {self.slab_bytes}"
            )
        block_id = self._next_block_id
        self._next_block_id += 1
        self.blocks[block_id] = MRBlock(block_id, sender_id, ActivityTag(now))
        return block_id

    def release_block(self, block_id: int) -> None:
        self._block(block_id)
        del self.blocks[block_id]
        if self.evicting == block_id:
            self.evicting = None

    def _block(self, block_id: int) -> MRBlock:
        try:
            return self.blocks[block_id]
        except KeyError:
            raise MappingError(f"peer {self.peer_id} has no block {block_id}") from None

    # data plane

    def write_pages(self, block_id: int, offset: int, pages, now: float) -> None:
        block = self._block(block_id)
        if offset < 0 or offset + len(pages) > self.slab_pages:
            raise MappingError(f"range {offset}+{len(pages)} outside block")
        data = block.data
        zero = self._zero
        for i, page in enumerate(pages):
            if page == zero:
                data.pop(offset + i, None)
            else:
                data[offset + i] = bytes(page)
        if pages:
            block.tag.touch(now)

    def read_pages(self, block_id: int, offset: int, count: int) -> list[bytes]:
        block = self._block(block_id)
        if offset < 0 or offset + count > self.slab_pages:
            raise MappingError(f"range {offset}+{count} outside block")
        get = block.data.get
        return [get(offset + i, self._zero) for i in range(count)]

    def copy_pages_to(self, block_id, dest: "PeerNode", dest_block: int, first: int, count: int, now: float) -> None:
        """Push a page range of a local block into ``dest`` (only materialized pages move)."""
        src = self._block(block_id).data
        dst_block = dest._block(dest_block)
        dst = dst_block.data
        end = first + count
        if count <= len(src):
            for off in range(first, end):
                dst.pop(off, None)
                if off in src:
                    dst[off] = src[off]
        else:
            for off in [o for o in dst if first <= o < end]:
                del dst[off]
            for off, page in src.items():
                if first <= off < end:
                    dst[off] = page
        dst_block.tag.touch(now)

    # activity

    def non_activity_duration(self, block_id: int, now: float) -> float:
        return now - self._block(block_id).tag.last_write_time

    def select_victim(self, now: float) -> int:
        if not self.blocks:
            raise MappingError(f"peer {self.peer_id} has no blocks to evict")
        # largest idle time, lowest id on ties
        return max(
            self.blocks.values(),
            key=lambda b: (now - b.tag.last_write_time, -b.block_id),
        ).block_id

    def pressure_tick(self, native_app_usage: int, now: float) -> EvictionNotice | None:
        """Apply a new native usage figure and emit at most one eviction."""
        if native_app_usage < 0:
            raise ValueError("native usage must be non-negative")
        self.native_app_usage = native_app_usage
        if self.failed or self.evicting is not None or not self.blocks:
            return None
        if self.free_bytes >= self.watermark_bytes:
            return None
        victim = self.select_victim(now)
        owner = self.blocks[victim].owner_sender_id
        if self.policy == DELETE:
            del self.blocks[victim]
            return EvictionNotice(self.peer_id, victim, owner, "deleted")
        self.evicting = victim
        return EvictionNotice(self.peer_id, victim, owner, "evict")

    # control plane

    def handle_control(self, message: dict, now: float = 0) -> dict:
        op = message.get("op")
        reply = {"ok": True}
        if op == "ALLOC_BLK":
            reply["block_id"] = self.allocate_block(message["sender"], now)
        elif op == "RELEASE_BLK":
            self.release_block(message["block_id"])
        elif op == "ABORT":
            if self.evicting == message.get("block_id"):
                self.evicting = None
        elif op in ("EVICT_REQ", "COPY_BEGIN", "COPY_DONE", "QUERY_FREE"):
            if op != "QUERY_FREE" and "block_id" in message:
                self._block(message["block_id"])
        else:
            raise TopologyError(f"unknown control op {op!r}")
        reply["free_bytes"] = self.free_bytes
        return reply
