import pytest

from tiermem.errors import ProtocolError
from tiermem.migration import MigrationSession, State

from conftest import PAGE, build, page


def fill_slab(d, slab, version=0):
    sp = d.config.slab_pages
    for i in range(sp):
        d.write(slab * sp + i, page(version + i))
    d.flush()


def owner_of(d, slab):
    return d.placement.slabs[slab].primary


def evict(cluster, peer_id):
    node = cluster.peers[peer_id]
    usage = node.total_bytes - len(node.blocks) * node.slab_bytes
    return cluster.pressure_tick(peer_id, usage)


def test_state_machine_only_moves_forward():
    s = MigrationSession(1, 0, ("p", 0))
    s.advance(State.DESTINATION_CHOSEN)
    with pytest.raises(ProtocolError):
        s.advance(State.REMAPPED)
    s.advance(State.COPYING)
    s.advance(State.REMAPPED)
    with pytest.raises(ProtocolError):
        s.advance(State.ABORTED)


def test_abort_allowed_before_remap():
    s = MigrationSession(1, 0, ("p", 0))
    s.advance(State.ABORTED)
    assert not s.active


def test_full_session_moves_the_block():
    cluster, d = build(pool=(8, 8))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    notice = evict(cluster, src[0])
    assert notice.kind == "evict" and notice.block_id == src[1]
    mgr = cluster.managers["s0"]
    session = mgr.sessions[0]
    assert session.state is State.DESTINATION_CHOSEN
    assert session.destination[0] != src[0]
    mgr.finish(session)
    assert session.state is State.DONE
    assert session.history == [State.REQUESTED, State.DESTINATION_CHOSEN, State.COPYING,
                               State.REMAPPED, State.FLUSHED, State.DONE]
    assert owner_of(d, 0) == session.destination
    assert src[1] not in cluster.peers[src[0]].blocks
    for i in range(16):
        assert d.read(i) == page(i)


def test_reads_during_copy_come_from_the_source():
    cluster, d = build(pool=(4, 4))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    evict(cluster, src[0])
    mgr = cluster.managers["s0"]
    mgr.chunk_pages = 4
    session = mgr.sessions[0]
    seen = []
    real = d.transport.read_pages

    def spy(peer, block, offset, count):
        seen.append((peer, block))
        return real(peer, block, offset, count)

    d.transport.read_pages = spy
    mgr.copy_step(session)
    assert session.state is State.COPYING and 0 < session.copied_pages < 16
    for i in range(16):
        assert d.read(i) == page(i)
    assert set(seen) == {src}
    while not mgr.copy_step(session):
        pass
    seen.clear()
    d.pool.reclaim_lru(4)
    d.read(15)
    assert set(seen) == {session.destination}


def test_writes_during_copy_are_held_then_flushed_to_destination():
    cluster, d = build(pool=(32, 32))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    evict(cluster, src[0])
    mgr = cluster.managers["s0"]
    mgr.chunk_pages = 4
    session = mgr.sessions[0]
    mgr.copy_step(session)
    d.write(2, page(200))
    d.write(20, page(201))  # other slab keeps draining behind the held entry
    assert d.drain_step() == 0
    assert d.has_staged_for(0)
    assert d.read(2) == page(200)
    mgr.copy_phase(session)
    assert session.state is State.REMAPPED
    mgr.flush_held(session)
    assert session.held_write_count == 1
    assert not d.staging
    dst_peer, dst_block = session.destination
    assert cluster.peers[dst_peer].read_pages(dst_block, 2, 1) == [page(200)]
    d.pool.reclaim_lru(32)
    assert d.read(2) == page(200) and d.read(20) == page(201)


def test_second_request_for_the_same_slab_is_ignored():
    cluster, d = build(pool=(8, 8))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    mgr = cluster.managers["s0"]
    first = mgr.on_evict_request(*src)
    assert first is not None
    assert mgr.on_evict_request(*src) is None
    assert len(mgr.sessions) == 1


def test_no_destination_aborts_and_keeps_data_on_disk():
    cluster, d = build(peers=2, peer_slabs=1, slabs=2, pool=(4, 4))
    fill_slab(d, 0)
    fill_slab(d, 1, version=50)
    src = owner_of(d, 0)
    mgr = cluster.managers["s0"]
    session = mgr.run(*src)
    assert session.state is State.ABORTED
    assert d.placement.locations(0) is None
    assert mgr.stats["spilled_pages"] == 16
    for i in range(16):
        assert d.read(i) == page(i)
    assert d.stats["disk_hits"] > 0


def test_destination_failure_restarts_copy_elsewhere():
    cluster, d = build(peers=4, pool=(8, 8))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    mgr = cluster.managers["s0"]
    mgr.chunk_pages = 4
    session = mgr.on_evict_request(*src)
    mgr.copy_step(session)
    first_dst = session.destination
    cluster.peers[first_dst[0]].failed = True
    mgr.finish(session)
    assert session.state is State.DONE and session.restarts == 1
    assert session.destination[0] not in (first_dst[0], src[0])
    for i in range(16):
        assert d.read(i) == page(i)


@pytest.mark.parametrize("slab_pages", [16, 128, 512])
def test_control_messages_do_not_depend_on_slab_size(slab_pages):
    cluster, d = build(slab_pages=slab_pages, slabs=2, pool=(8, 8))
    d.write(0, page(1))
    d.flush()
    session = cluster.managers["s0"].run(*owner_of(d, 0))
    assert session.state is State.DONE
    assert session.messages == 5
    assert session.chunks == -(-slab_pages // 128)


def test_one_gigabyte_slab_copies_in_2048_messages():
    cluster, d = build(slab_pages=(1 << 30) // PAGE, slabs=1, peers=3, peer_slabs=2, pool=(8, 8))
    d.write(12345, page(3))
    d.flush()
    session = cluster.managers["s0"].run(*owner_of(d, 0))
    assert session.chunks == 2048
    assert d.transport.stats["messages"] == 1 + 2048
    d.pool.reclaim_lru(8)
    assert d.read(12345) == page(3)


def test_delete_policy_loses_block_to_disk_backup():
    cluster, d = build(policy="delete", disk="always", pool=(4, 4))
    fill_slab(d, 0)
    src = owner_of(d, 0)
    notice = evict(cluster, src[0])
    assert notice.kind == "deleted"
    assert d.placement.locations(0) is None
    assert d.read(3) == page(3)
    assert d.stats["disk_hits"] == 1


def test_evenly_spread_blocks_mean_no_connects_during_migration():
    cluster, d = build(peers=6, peer_slabs=6, slabs=18, pool=(16, 16))
    for s in range(18):
        d.write(s * 16, page(s))
    d.flush()
    assert all(node.blocks for node in cluster.peers.values())
    before = d.clock.totals.get("connect", 0)
    for pid in list(cluster.peers)[:3]:
        evict(cluster, pid)
    cluster.settle()
    assert cluster.migrations() == 3
    assert d.clock.totals.get("connect", 0) == before
