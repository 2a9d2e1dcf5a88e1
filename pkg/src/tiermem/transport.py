"""Message layer between a sender and its peers, with simulated latency.

Data operations are one-sided: the peer only stores or returns bytes. Every
operation charges the sender's :class:`~tiermem.clock.VirtualClock` on whatever
lane the caller is currently running in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .clock import VirtualClock
from .errors import ConfigError, TopologyError, TransportError
from .remote import PeerNode


@dataclass(frozen=True)
class LatencyModel:
    """Simulated cost of each primitive, in abstract time units (~microseconds).

    Only the relative ordering matters; defaults keep network well below disk
    and connection/mapping well above a single message.
    """

    copy_per_page: float = 1
    net_write: float = 5
    net_read: float = 5
    connect: float = 200
    map_block: float = 50
    disk_write: float = 1000
    disk_read: float = 500

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"latency.{f.name} must be > 0")
        if not self.disk_read > self.net_read:
            raise ConfigError("latency.disk_read must exceed latency.net_read")
        if not self.disk_write > self.net_write:
            raise ConfigError("latency.disk_write must exceed latency.net_write")

    @classmethod
    def from_dict(cls, values: dict) -> "LatencyModel":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown latency keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


@dataclass
class PeerEndpoint:
    peer_id: str
    connected: bool = False
    free_bytes: int = 0
    mapped_block_count: int = 0


class Transport:
    """Charging and bookkeeping common to every backend.

    Subclasses provide the ``_do_*`` primitives that actually move bytes.
    """

    def __init__(
        self,
        clock: VirtualClock,
        latency: LatencyModel,
        sender_id: str,
        peer_ids,
        message_size: int = 512 * 1024,
        page_size: int = 4096,
    ):
        self.clock = clock
        self.latency = latency
        self.sender_id = sender_id
        self.message_size = message_size
        self.page_size = page_size
        self.endpoints = {pid: PeerEndpoint(pid) for pid in peer_ids}
        self.failed: set[str] = set()
        self.stats = {"messages": 0, "bytes_written": 0, "bytes_read": 0, "ctrl": 0}

    @property
    def peer_ids(self) -> list[str]:
        return list(self.endpoints)

    def _endpoint(self, peer_id: str) -> PeerEndpoint:
        try:
            return self.endpoints[peer_id]
        except KeyError:
            raise TopologyError(f"unknown peer {peer_id!r}") from None

    def _ready(self, peer_id: str) -> PeerEndpoint:
        ep = self._endpoint(peer_id)
        if self.is_failed(peer_id):
            raise TransportError(f"peer {peer_id} failed", peer_id)
        if not ep.connected:
            raise TransportError(f"peer {peer_id} not connected", peer_id)
        return ep

    def is_failed(self, peer_id: str) -> bool:
        return peer_id in self.failed or self._is_failed(peer_id)

    def messages_for(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.message_size)

    def _now(self) -> float:
        return self.clock.lane_time(self.clock.current_lane)

    # public API

    def connect(self, peer_id: str) -> PeerEndpoint:
        ep = self._endpoint(peer_id)
        if ep.connected:
            return ep
        if self._is_failed(peer_id):
            raise TransportError(f"peer {peer_id} failed", peer_id)
        self._do_connect(peer_id)
        self.clock.charge("connect", self.latency.connect)
        ep.connected = True
        ep.free_bytes = self._do_control(peer_id, {"op": "QUERY_FREE"})["free_bytes"]
        return ep

    def is_connected(self, peer_id: str) -> bool:
        return self._endpoint(peer_id).connected

    def query_free(self, peer_id: str) -> int:
        """Refresh the advertised free memory of a peer (connecting if needed)."""
        ep = self.connect(peer_id)
        self._ready(peer_id)
        ep.free_bytes = self._do_control(peer_id, {"op": "QUERY_FREE"})["free_bytes"]
        return ep.free_bytes

    def map_block(self, peer_id: str) -> int:
        """Allocate and register a fresh block on ``peer_id`` for this sender."""
        ep = self._ready(peer_id)
        reply = self._do_control(peer_id, {"op": "ALLOC_BLK", "sender": self.sender_id})
        self.clock.charge("map_block", self.latency.map_block)
        ep.free_bytes = reply["free_bytes"]
        ep.mapped_block_count += 1
        return reply["block_id"]

    def write_pages(self, peer_id: str, block_id: int, offset: int, pages) -> None:
        if not pages:
            return
        self._ready(peer_id)
        nbytes = len(pages) * self.page_size
        n = self.messages_for(nbytes)
        self.clock.charge("net_write", n * self.latency.net_write)
        self.stats["messages"] += n
        self.stats["bytes_written"] += nbytes
        self._do_write(peer_id, block_id, offset, pages, self._now())

    def read_pages(self, peer_id: str, block_id: int, offset: int, count: int) -> list[bytes]:
        if count <= 0:
            return []
        self._ready(peer_id)
        self.clock.charge("net_read", count * self.latency.net_read)
        self.stats["bytes_read"] += count * self.page_size
        return self._do_read(peer_id, block_id, offset, count)

    def send_control(self, peer_id: str, message: dict) -> dict:
        ep = self._ready(peer_id)
        self.clock.charge("ctrl", self.latency.net_write + self.latency.net_read)
        self.stats["ctrl"] += 1
        reply = self._do_control(peer_id, message)
        if "free_bytes" in reply:
            ep.free_bytes = reply["free_bytes"]
        if message.get("op") == "RELEASE_BLK":
            ep.mapped_block_count = max(0, ep.mapped_block_count - 1)
        elif message.get("op") == "ALLOC_BLK":
            ep.mapped_block_count += 1
        return reply

    def copy_range(self, src: str, src_block: int, dst: str, dst_block: int, first: int, count: int) -> None:
        """Move ``count`` pages of a block from one peer to another."""
        self._ready(src)
        self._ready(dst)
        nbytes = count * self.page_size
        n = self.messages_for(nbytes)
        self.clock.charge("net_write", n * self.latency.net_write)
        self.stats["messages"] += n
        self._do_copy(src, src_block, dst, dst_block, first, count, self._now())

    # backend hooks

    def _is_failed(self, peer_id: str) -> bool:
        return False

    def _do_connect(self, peer_id):
        raise NotImplementedError

    def _do_write(self, peer_id, block_id, offset, pages, now):
        raise NotImplementedError

    def _do_read(self, peer_id, block_id, offset, count):
        raise NotImplementedError

    def _do_control(self, peer_id, message):
        raise NotImplementedError

    def _do_copy(self, src, src_block, dst, dst_block, first, count, now):
        raise NotImplementedError


class InProcessTransport(Transport):
    """Direct calls into :class:`PeerNode` objects living in this process."""

    def __init__(self, clock, latency, sender_id, peers: dict[str, PeerNode], **kw):
        super().__init__(clock, latency, sender_id, list(peers), **kw)
        self.peers = peers

    def _is_failed(self, peer_id):
        return self.peers[peer_id].failed

    def _do_connect(self, peer_id):
        pass

    def _do_write(self, peer_id, block_id, offset, pages, now):
        self.peers[peer_id].write_pages(block_id, offset, pages, now)

    def _do_read(self, peer_id, block_id, offset, count):
        return self.peers[peer_id].read_pages(block_id, offset, count)

    def _do_control(self, peer_id, message):
        return self.peers[peer_id].handle_control(message, self._now())

    def _do_copy(self, src, src_block, dst, dst_block, first, count, now):
        # source pushes straight to the destination, sender only pays the wire time
        self.peers[src].copy_pages_to(src_block, self.peers[dst], dst_block, first, count, now)
