import pytest

from tiermem.cluster import Cluster
from tiermem.device import DeviceConfig, FaultPolicy
from tiermem.mempool import PoolConfig

PAGE = 4096


def page(fill: int) -> bytes:
    return bytes([fill % 255 + 1]) * PAGE


def build(
    peers=4,
    peer_slabs=8,
    slab_pages=16,
    slabs=8,
    pool=(64, 64),
    queue=1024,
    replication=1,
    disk="off",
    policy="migrate",
    seed=0,
    **device_kw,
):
    """A cluster with one sender ("s0"); returns (cluster, device)."""
    cluster = Cluster([peer_slabs * slab_pages * PAGE] * peers, slab_pages, policy=policy)
    cfg = DeviceConfig(slabs * slab_pages * PAGE, slab_pages=slab_pages, queue_entries=queue, **device_kw)
    device = cluster.create_device(
        "s0", cfg, PoolConfig(*pool), FaultPolicy(replication, disk), seed=seed)
    return cluster, device


@pytest.fixture
def small():
    return build()
