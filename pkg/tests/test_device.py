import itertools

import pytest
from hypothesis import given, settings, strategies as st

from tiermem.clock import critical_path_violations
from tiermem.errors import AddressRangeError, BackpressureError, DataLossError

from conftest import PAGE, build, page


def test_write_then_read_is_local_and_network_free(small):
    _, d = small
    d.write(5, page(1) * 2)
    before = dict(d.clock.totals)
    assert d.read(5, 2) == page(1) * 2
    assert d.clock.totals.get("net_read", 0) == before.get("net_read", 0)
    assert d.stats["local_hits"] == 2


def test_write_charges_only_the_copy(small):
    _, d = small
    d.write(0, page(1) * 4)
    kinds = {c.kind for c in d.clock.trace if c.op == "write"}
    assert kinds == {"copy"}
    assert d.clock.fg == 4


def test_never_written_reads_zero(small):
    _, d = small
    assert d.read(100) == bytes(PAGE)


@pytest.mark.parametrize("offset,data", [
    (-1, page(1)), (8 * 16, page(1)), (8 * 16 - 1, page(1) * 2),
])
def test_out_of_range(small, offset, data):
    _, d = small
    with pytest.raises(AddressRangeError):
        d.write(offset, data)


def test_bad_write_sizes(small):
    _, d = small
    with pytest.raises(ValueError):
        d.write(0, b"x" * 100)
    with pytest.raises(ValueError):
        d.write(0, page(1) * 17)  # 68KB > 64KB block I/O


def test_single_entry_is_one_message():
    cluster, d = build(slab_pages=64, slabs=2)
    d.write(0, page(1) * 16)
    d.flush()
    assert d.transport.stats["messages"] == 1


def test_drain_follows_sequence_order():
    cluster, d = build(queue=64, message_size=2 * PAGE)
    order = []
    real = d.transport.write_pages

    def spy(peer, block, offset, pages):
        order.append(pages[0])
        return real(peer, block, offset, pages)

    d.transport.write_pages = spy
    for i in range(20):
        d.write((i * 37) % 100, page(i))
    d.flush()
    assert order == [page(i) for i in range(20)]
    seqs = [e.sequence_no for e in d.reclaimable]
    assert seqs == sorted(seqs)


def test_remote_bit_set_only_after_drain(small):
    _, d = small
    d.write(3, page(1))
    assert not d.remote_ready[3]
    d.flush()
    assert d.remote_ready[3]


def test_read_miss_comes_back_from_remote():
    _, d = build(pool=(4, 4))
    for i in range(12):
        d.write(i, page(i))
        d.flush()
    assert 0 not in d.gpt
    assert d.read(0) == page(0)
    assert d.stats["remote_hits"] == 1


def test_reads_see_latest_data_while_drainer_is_stalled(small):
    _, d = small
    for v in range(5):
        d.write(7, page(v))
        assert d.read(7) == page(v)
    assert len(d.staging) == 5 and not d.remote_ready[7]


# update interleavings


def one_entry_per_message(**kw):
    return build(message_size=PAGE, **kw)


def test_case_a_two_writes_before_drain():
    _, d = one_entry_per_message()
    d.write(0, page(1))
    d.write(0, page(2))
    slot = d.gpt[0]
    assert slot.update_flag and slot.pending == 2
    assert d.drain_step() == 1          # first entry only
    assert slot.update_flag and not slot.reclaimable_flag
    assert d.pool.reclaim_lru(1) == []
    assert d.read(0) == page(2)


def test_case_b_interleave_reads_latest_throughout():
    _, d = one_entry_per_message()
    d.write(0, page(1))
    assert d.read(0) == page(1)
    d.write(0, page(2))
    assert d.read(0) == page(2)
    d.drain_step()
    assert d.read(0) == page(2)
    assert d.pool.reclaim_lru(1) == []
    assert d.read(0) == page(2)
    d.drain_step()
    assert d.read(0) == page(2)
    assert not d.gpt[0].update_flag and d.gpt[0].reclaimable_flag
    d.pool.reclaim_lru(1)
    assert 0 not in d.gpt
    assert d.read(0) == page(2)


def test_case_b_updates_further_apart_than_the_queue():
    _, d = one_entry_per_message(queue=2, pool=(4, 4))
    d.write(0, page(1))
    for i in range(1, 6):
        d.write(i, page(10 + i))
        d.flush()
    assert len(d.reclaimable) == 2
    d.write(0, page(2))
    d.flush()
    for i in range(6, 9):
        d.write(i, page(i))
    d.flush()
    assert d.read(0) == page(2)


def test_case_c_first_entry_pinned_until_second_drains():
    _, d = one_entry_per_message(queue=4, pool=(2, 2))
    d.write(0, page(1))
    d.write(0, page(2))
    d.drain_step()
    # only one slot is in use and it still has an update pending
    d.write(1, page(9))
    with pytest.raises(BackpressureError):
        # block the drainer so the stall cannot make progress
        d.pause_slab(0)
        d.write(2, page(8))
    d.resume_slab(0)
    assert d.read(0) == page(2)


OPS = ("wA", "wB", "drain", "reclaim", "rA")


@pytest.mark.parametrize("q", [1, 2, 3])
def test_small_queue_traces_exhaustively(q):
    """Every op sequence of length 5 keeps reads exact and staged slots pinned."""
    for trace in itertools.product(OPS, repeat=5):
        _, d = one_entry_per_message(queue=q, pool=(3, 3))
        shadow = {}
        version = 0
        for op in trace:
            if op in ("wA", "wB"):
                version += 1
                addr = 0 if op == "wA" else 1
                d.write(addr, page(version))
                shadow[addr] = page(version)
            elif op == "drain":
                d.drain_step()
            elif op == "reclaim":
                for slot in d.pool.reclaim_lru(3):
                    assert slot.pending == 0
            else:
                assert d.read(0) == shadow.get(0, bytes(PAGE)), trace
            for slot in d.pool.pages.values():
                if slot.pending:
                    assert slot.addr is not None and d.gpt.get(slot.addr) is slot
            assert len(d.staging) <= q and len(d.reclaimable) <= q
        for addr, data in shadow.items():
            assert d.read(addr) == data, trace


# fault handling


def test_replica_serves_reads_when_primary_dies():
    cluster, d = build(replication=2, pool=(4, 4))
    for i in range(10):
        d.write(i, page(i))
    d.flush()
    primary = d.placement.slabs[0].primary[0]
    cluster.fail_peer(primary)
    for i in range(10):
        assert d.read(i) == page(i)
    assert len(d.placement.slabs[0].locations) == 2  # re-replicated
    assert primary not in d.placement.slabs[0].peers


def test_failure_detected_on_the_read_path():
    cluster, d = build(replication=2, pool=(4, 4))
    for i in range(10):
        d.write(i, page(i))
    d.flush()
    cluster.peers[d.placement.slabs[0].primary[0]].failed = True  # no notification
    assert d.read(0) == page(0)


def test_disk_backup_always_survives_total_loss():
    cluster, d = build(disk="always", pool=(4, 4))
    for i in range(10):
        d.write(i, page(i))
    d.flush()
    cluster.fail_peer(d.placement.slabs[0].primary[0])
    assert d.read(0) == page(0)
    assert d.stats["disk_hits"] == 1
    assert d.clock.totals["disk_read"] == d.latency.disk_read


def test_on_remote_failure_writes_batch_to_disk():
    cluster, d = build(disk="on-remote-failure", pool=(8, 8), peers=2)
    d.write(0, page(1))
    d.flush()
    owner = d.placement.slabs[0].primary[0]
    cluster.peers[owner].failed = True  # silent: found by the next drain
    d.write(1, page(2))
    d.flush()
    assert d.disk.has(1)
    d.pool.reclaim_lru(8)
    assert d.read(1) == page(2)
    with pytest.raises(DataLossError) as err:
        d.read(0)
    assert err.value.page == 0


def test_drain_retries_on_a_new_peer_without_backup():
    cluster, d = build(peers=3, pool=(8, 8))
    d.write(0, page(1))
    d.flush()
    owner = d.placement.slabs[0].primary[0]
    cluster.peers[owner].failed = True
    d.write(1, page(2))
    d.flush()
    assert d.placement.slabs[0].primary[0] != owner
    assert d.remote_ready[1] and not d.remote_ready[0]


def test_data_loss_is_reported():
    cluster, d = build(pool=(4, 4))
    for i in range(8):
        d.write(i, page(i))
    d.flush()
    cluster.fail_peer(d.placement.slabs[0].primary[0])
    with pytest.raises(DataLossError):
        d.read(0)


# backpressure and pool pressure


def test_full_staging_stalls_and_charges_the_wait():
    _, d = build(queue=4)
    for i in range(4):
        d.write(i * 16, page(i))
    assert d.stats["stalls"] == 0
    d.write(5, page(5))
    assert d.stats["stalls"] == 1 and d.stats["stall_time"] > 0
    stall = [c for c in d.clock.trace if c.kind == "stall"]
    assert stall and all(c.lane == "fg" for c in stall)
    assert not critical_path_violations(d.clock.trace)


def test_exhausted_pool_with_blocked_drainer_raises():
    _, d = build(pool=(2, 2))
    d.pause_slab(0)
    d.write(0, page(1))
    d.write(1, page(2))
    with pytest.raises(BackpressureError):
        d.write(2, page(3))


def test_host_signal_shrinks_by_flushing_staged_pages():
    _, d = build(pool=(4, 64))
    for i in range(40):
        d.write(i, page(i))
    assert d.pool.size > 40
    size = d.host_signal(2 * 8 * PAGE)  # room for 8 pages
    assert size == 8 and not d.staging
    for i in range(40):
        assert d.read(i) == page(i)


def test_baseline_mode_puts_network_in_writes():
    _, d = build(critical_path_opt=False)
    d.write(0, page(1))
    assert critical_path_violations(d.clock.trace)
    assert not d.staging


def test_lazy_send_defers_drain_until_pressure():
    cluster, d = build(lazy_send=True, pool=(16, 16))
    d.write(0, page(1))
    cluster.pump()
    assert len(d.staging) == 1
    for i in range(1, 14):
        d.write(i, page(i))
    cluster.pump()
    assert len(d.staging) < 14


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.sampled_from(["w", "w", "r", "pump", "flush", "signal"]),
            st.integers(0, 127), st.integers(1, 4), st.integers(0, 250),
        ),
        max_size=80,
    ),
    st.integers(1, 8),
)
def test_matches_flat_map_oracle(ops, q):
    cluster, d = build(queue=q, pool=(4, 32), message_size=8 * PAGE)
    shadow = {}
    for op, addr, n, v in ops:
        n = min(n, 128 - addr)
        if op == "w":
            data = b"".join(page(v + k) for k in range(n))
            d.write(addr, data)
            for k in range(n):
                shadow[addr + k] = page(v + k)
        elif op == "r":
            want = b"".join(shadow.get(addr + k, bytes(PAGE)) for k in range(n))
            assert d.read(addr, n) == want
        elif op == "pump":
            cluster.pump()
        elif op == "flush":
            d.flush()
        else:
            d.host_signal(v * PAGE)
        d.check()
    assert not critical_path_violations(d.clock.trace)
    for addr, data in shadow.items():
        assert d.read(addr) == data
