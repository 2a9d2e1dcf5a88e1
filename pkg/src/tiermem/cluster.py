"""In-process cluster: peers, sender devices, pressure and failure injection."""

from __future__ import annotations

import logging

from .clock import VirtualClock
from .device import Device, DeviceConfig, FaultPolicy
from .errors import TopologyError
from .mempool import PoolConfig
from .migration import MigrationManager, State
from .placement import P2C, Placement
from .remote import MIGRATE, EvictionNotice, PeerNode
from .transport import InProcessTransport, LatencyModel

log = logging.getLogger(__name__)


class Cluster:
    """Peers plus any number of senders, each with its own virtual clock."""

    def __init__(
        self,
        peer_bytes,
        slab_pages: int,
        page_size: int = 4096,
        latency: LatencyModel | None = None,
        policy: str = MIGRATE,
        watermark_slabs: float = 1,
        trace: bool = True,
    ):
        if isinstance(peer_bytes, int):
            raise TypeError("peer_bytes must be a list of per-peer sizes")
        self.slab_pages = slab_pages
        self.page_size = page_size
        self.latency = latency or LatencyModel()
        self.trace = trace
        watermark = int(watermark_slabs * slab_pages * page_size)
        self.peers: dict[str, PeerNode] = {}
        for i, size in enumerate(peer_bytes):
            pid = f"peer-{i}"
            self.peers[pid] = PeerNode(pid, int(size), slab_pages, page_size, watermark, policy)
        self.devices: dict[str, Device] = {}
        self.managers: dict[str, MigrationManager] = {}
        self.notices: list[EvictionNotice] = []
        self.evictions = 0

    def create_device(
        self,
        sender_id: str,
        config: DeviceConfig,
        pool: PoolConfig,
        fault: FaultPolicy | None = None,
        placement_policy: str = P2C,
        seed: int = 0,
        transport=None,
    ) -> Device:
        if sender_id in self.devices:
            raise TopologyError(f"duplicate sender {sender_id!r}")
        if config.slab_pages != self.slab_pages:
            raise TopologyError("device slab size differs from the cluster's block size")
        fault = fault or FaultPolicy()
        clock = VirtualClock(trace=self.trace)
        if transport is None:
            transport = InProcessTransport(
                clock, self.latency, sender_id, self.peers,
                message_size=config.message_size, page_size=config.page_size,
            )
        placement = Placement(transport, config.slab_pages, fault.replication_factor,
                              placement_policy, seed)
        device = Device(config, pool, fault, transport, placement, clock)
        self.devices[sender_id] = device
        self.managers[sender_id] = MigrationManager(device)
        return device

    def peer(self, peer_id: str) -> PeerNode:
        try:
            return self.peers[peer_id]
        except KeyError:
            raise TopologyError(f"unknown peer {peer_id!r}") from None

    def now(self) -> float:
        return max((d.clock.now() for d in self.devices.values()), default=0)

    # injected events

    def pressure_tick(self, peer_id: str, native_usage: int) -> EvictionNotice | None:
        """Set a peer's native memory use and route any eviction it asks for."""
        peer = self.peer(peer_id)
        notice = peer.pressure_tick(native_usage, self.now())
        if notice is None:
            return None
        self.notices.append(notice)
        self.evictions += 1
        owner = self.devices.get(notice.owner)
        if owner is None:
            log.warning("eviction for unknown sender %s", notice.owner)
            return notice
        if notice.kind == "deleted":
            owner.on_block_lost(notice.peer_id, notice.block_id)
        else:
            session = self.managers[notice.owner].on_evict_request(notice.peer_id, notice.block_id)
            if session is None:
                # not ours to move; let the peer pick again later
                peer.evicting = None
        return notice

    def fail_peer(self, peer_id: str) -> None:
        self.peer(peer_id).failed = True
        for device in self.devices.values():
            device.on_peer_failed(peer_id)

    def host_signal(self, sender_id: str, host_free_bytes: int) -> int:
        return self.devices[sender_id].host_signal(host_free_bytes)

    # background progress

    def pump(self) -> None:
        """Give every drainer and open migration a slice of background time."""
        for sid, device in self.devices.items():
            manager = self.managers[sid]
            for session in manager.active_sessions:
                if session.state in (State.DESTINATION_CHOSEN, State.COPYING):
                    if device.clock.lane_time(manager.lane) <= device.clock.fg:
                        manager.copy_step(session)
                if session.state is State.REMAPPED:
                    manager.flush_held(session)
            device.pump()

    def settle(self) -> None:
        """Finish all migrations and drain everything."""
        for sid, device in self.devices.items():
            self.managers[sid].finish_all()
            device.flush()

    def migrations(self) -> int:
        return sum(m.stats["migrations"] for m in self.managers.values())

    def bytes_moved(self) -> int:
        return sum(m.stats["bytes_moved"] for m in self.managers.values())

    def resident_bytes(self) -> int:
        """Bytes held in peer blocks (materialized pages only)."""
        return sum(
            len(b.data) * self.page_size for p in self.peers.values() for b in p.blocks.values()
        )


def create_device(
    space_size: int,
    pool: PoolConfig,
    fault: FaultPolicy | None = None,
    block_io_size: int = 64 * 1024,
    message_size: int = 512 * 1024,
    peers: int = 4,
    slab_pages: int | None = None,
    latency: LatencyModel | None = None,
    seed: int = 0,
) -> Device:
    """One sender on a private cluster of equal peers sized to hold the space."""
    page_size = pool.page_size
    space_pages = space_size // page_size
    if slab_pages is None:
        slab_pages = min(space_pages, (1 << 30) // page_size)
    fault = fault or FaultPolicy()
    slabs = -(-space_pages // slab_pages)
    per_peer = (-(-slabs * fault.replication_factor // peers) + 2) * slab_pages * page_size
    cluster = Cluster([per_peer] * peers, slab_pages, page_size, latency)
    config = DeviceConfig(space_size, page_size, block_io_size, message_size, slab_pages=slab_pages)
    device = cluster.create_device("sender-0", config, pool, fault, seed=seed)
    device.cluster = cluster
    return device
