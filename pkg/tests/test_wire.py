import pytest
from hypothesis import given, strategies as st

from tiermem.clock import VirtualClock
from tiermem.device import Device, DeviceConfig, FaultPolicy
from tiermem.errors import MappingError, TransportError
from tiermem.mempool import PoolConfig
from tiermem.migration import MigrationManager, State
from tiermem.placement import Placement
from tiermem.remote import PeerNode
from tiermem.transport import LatencyModel
from tiermem.wire import ACK, CTRL, READ, WRITE, Frame, PeerServer, SocketTransport, decode, encode

PAGE = 4096
SLAB = 16


def test_header_layout_is_little_endian():
    raw = encode(Frame(WRITE, block_id=2, offset=3, count=1, payload=b"ab"))
    assert raw[:4] == (1 + 8 + 4 + 4 + 2).to_bytes(4, "little")
    assert raw[4] == 1
    assert raw[5:13] == (2).to_bytes(8, "little")
    assert raw[13:17] == (3).to_bytes(4, "little")
    assert raw[17:21] == (1).to_bytes(4, "little")
    assert raw[21:] == b"ab"


@given(st.sampled_from([WRITE, READ, CTRL, ACK]), st.integers(0, 2**64 - 1),
       st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.binary(max_size=300))
def test_round_trip(op, block, offset, count, payload):
    frame = Frame(op, block, offset, count, payload)
    raw = encode(frame)
    assert decode(raw + b"tail") == (frame, len(raw))


@pytest.mark.parametrize("raw", [b"\x01\x00", encode(Frame(ACK, payload=b"xyz"))[:-1],
                                 b"\x11\x00\x00\x00\x09" + bytes(16)])
def test_malformed(raw):
    with pytest.raises(ValueError):
        decode(raw)


@pytest.fixture
def servers():
    nodes = {f"peer-{i}": PeerNode(f"peer-{i}", 8 * SLAB * PAGE, SLAB) for i in range(3)}
    running = {pid: PeerServer(node).start() for pid, node in nodes.items()}
    yield nodes, running
    for s in running.values():
        s.stop()


def socket_device(running, pool=(4, 4)):
    clock = VirtualClock()
    t = SocketTransport(clock, LatencyModel(), "s0", {p: s.address for p, s in running.items()})
    cfg = DeviceConfig(4 * SLAB * PAGE, slab_pages=SLAB)
    d = Device(cfg, PoolConfig(*pool), FaultPolicy(), t, Placement(t, SLAB), clock)
    return d, t


def test_device_over_sockets(servers):
    nodes, running = servers
    d, t = socket_device(running)
    for i in range(40):
        d.write(i, bytes([i + 1]) * PAGE)
    d.flush()
    d.pool.reclaim_lru(4)
    for i in range(40):
        assert d.read(i) == bytes([i + 1]) * PAGE
    assert d.stats["remote_hits"] > 0
    assert sum(len(n.blocks) for n in nodes.values()) == 3
    t.close()


def test_remote_errors_cross_the_wire(servers):
    _, running = servers
    _, t = socket_device(running)
    t.connect("peer-0")
    with pytest.raises(MappingError):
        t.read_pages("peer-0", 99, 0, 1)
    t.close()


def test_migration_relays_over_sockets(servers):
    nodes, running = servers
    d, t = socket_device(running, pool=(2, 2))
    mgr = MigrationManager(d)
    for i in range(SLAB):
        d.write(i, bytes([i + 1]) * PAGE)
    d.flush()
    src = d.placement.slabs[0].primary
    session = mgr.run(*src)
    assert session.state is State.DONE
    assert src[1] not in nodes[src[0]].blocks
    d.pool.reclaim_lru(2)
    for i in range(SLAB):
        assert d.read(i) == bytes([i + 1]) * PAGE
    t.close()


def test_stopped_server_is_a_transport_error(servers):
    _, running = servers
    _, t = socket_device(running)
    t.connect("peer-1")
    running["peer-1"].stop()
    with pytest.raises(TransportError):
        t.query_free("peer-1")
    t.close()
