"""Sender-driven migration of a pressured peer block to another peer.

The sender runs every step. While a session is open the slab's drains are
paused (new writes pile up in staging) and reads keep going to the source,
because the slab map only switches to the destination at remap time.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field

from .errors import BackpressureError, CapacityError, MappingError, ProtocolError, TransportError
from .device import Device, DiskSink

log = logging.getLogger(__name__)


class State(enum.Enum):
    REQUESTED = 0
    DESTINATION_CHOSEN = 1
    COPYING = 2
    REMAPPED = 3
    FLUSHED = 4
    DONE = 5
    ABORTED = 6


TERMINAL = (State.DONE, State.ABORTED)


@dataclass
class MigrationSession:
    session_id: int
    slab_id: int
    source: tuple
    destination: tuple | None = None
    state: State = State.REQUESTED
    held_write_count: int = 0
    copied_pages: int = 0
    messages: int = 0
    chunks: int = 0
    restarts: int = 0
    history: list = field(default_factory=lambda: [State.REQUESTED])

    @property
    def active(self) -> bool:
        return self.state not in TERMINAL

    def advance(self, new: State) -> None:
        cur = self.state
        if new is State.ABORTED:
            ok = cur.value < State.REMAPPED.value
        else:
            ok = new.value == cur.value + 1
        if not ok:
            raise ProtocolError(f"session {self.session_id}: {cur.name} -> {new.name}")
        self.state = new
        self.history.append(new)


class MigrationManager:
    """Runs migrations for one sender device."""

    def __init__(self, device: Device, chunk_pages: int | None = None):
        self.device = device
        self.placement = device.placement
        self.transport = device.transport
        self.clock = device.clock
        slab = device.config.slab_pages
        self.chunk_pages = chunk_pages or max(1, device.config.message_size // device.config.page_size)
        self.chunk_pages = min(self.chunk_pages, slab)
        self.lane = f"migrate:{device.sender_id}"
        self.sessions: dict[int, MigrationSession] = {}
        self.finished: list[MigrationSession] = []
        self._ids = itertools.count(1)
        self.stats = {"migrations": 0, "aborted": 0, "bytes_moved": 0, "ignored": 0, "spilled_pages": 0}
        device.blocked_hook = self.finish_all

    # protocol steps

    def _ctrl(self, session, peer, op, **extra) -> dict:
        msg = {"op": op, "slab_id": session.slab_id, "session_id": session.session_id}
        msg.update(extra)
        session.messages += 1
        return self.transport.send_control(peer, msg)

    def on_evict_request(self, peer_id: str, block_id: int) -> MigrationSession | None:
        """Open a session for a block the peer wants back (None if ignored)."""
        slab = self.placement.slab_for_block(peer_id, block_id)
        if slab is None or slab in self.sessions:
            self.stats["ignored"] += 1
            return None
        session = MigrationSession(next(self._ids), slab, (peer_id, block_id))
        self.sessions[slab] = session
        self.device.pause_slab(slab)
        with self.clock.lane(self.lane):
            try:
                self._ctrl(session, peer_id, "EVICT_REQ", block_id=block_id)
            except (TransportError, MappingError):
                self._abort(session, "source unreachable")
                return session
            self._choose_destination(session)
        return session

    def _choose_destination(self, session) -> None:
        mapping = self.placement.slabs[session.slab_id]
        try:
            session.destination = self.placement.allocate(exclude=mapping.peers)
        except CapacityError:
            self._abort(session, "no destination with a free block")
            return
        session.messages += 1  # ALLOC_BLK
        if session.state is State.REQUESTED:
            session.advance(State.DESTINATION_CHOSEN)

    def copy_step(self, session: MigrationSession, chunks: int = 1) -> bool:
        """Copy up to ``chunks`` message-sized pieces; True once remapped."""
        if session.state is State.DESTINATION_CHOSEN:
            with self.clock.lane(self.lane):
                self._ctrl(session, session.source[0], "COPY_BEGIN",
                           block_id=session.source[1], dest=session.destination)
            session.advance(State.COPYING)
        if session.state is not State.COPYING:
            return session.state.value >= State.REMAPPED.value
        slab_pages = self.device.config.slab_pages
        src_peer, src_block = session.source
        with self.clock.lane(self.lane):
            for _ in range(chunks):
                first = session.copied_pages
                if first >= slab_pages:
                    break
                count = min(self.chunk_pages, slab_pages - first)
                dst_peer, dst_block = session.destination
                try:
                    self.transport.copy_range(src_peer, src_block, dst_peer, dst_block, first, count)
                except (TransportError, MappingError):
                    if self.transport.is_failed(src_peer):
                        self._source_lost(session)
                        return False
                    # destination died: start over somewhere else
                    session.restarts += 1
                    session.copied_pages = 0
                    self.placement.release_block(dst_peer, dst_block)
                    mapping = self.placement.slabs[session.slab_id]
                    try:
                        session.destination = self.placement.allocate(
                            exclude=mapping.peers + [dst_peer])
                    except CapacityError:
                        session.destination = None
                        self._abort(session, "no destination after failure")
                        return False
                    continue
                session.copied_pages += count
                session.chunks += 1
                self.stats["bytes_moved"] += count * self.device.config.page_size
            if session.copied_pages >= slab_pages:
                self._ctrl(session, src_peer, "COPY_DONE", block_id=src_block)
                self.placement.remap_slab(session.slab_id, session.source, session.destination)
                session.advance(State.REMAPPED)
                return True
        return False

    def copy_phase(self, session: MigrationSession) -> None:
        while session.state in (State.DESTINATION_CHOSEN, State.COPYING):
            self.copy_step(session, chunks=1 << 30)

    def flush_held(self, session: MigrationSession) -> None:
        if session.state is not State.REMAPPED:
            raise ProtocolError(f"flush_held in state {session.state.name}")
        device = self.device
        slab = session.slab_id
        session.held_write_count = device.resume_slab(slab)
        with self.clock.lane(device.drain_lane):
            while device.has_staged_for(slab):
                if device.drain_step():
                    continue
                # head of the queue is held by another open session
                others = [s for s in self.sessions.values() if s is not session and s.active]
                if not others:
                    raise BackpressureError(f"slab {slab}: held writes cannot drain")
                self.finish(others[0])
        session.advance(State.FLUSHED)
        with self.clock.lane(self.lane):
            try:
                self._ctrl(session, session.source[0], "RELEASE_BLK", block_id=session.source[1])
            except (TransportError, MappingError):
                pass
        session.advance(State.DONE)
        self._close(session)
        self.stats["migrations"] += 1

    def finish(self, session: MigrationSession) -> None:
        """Run a session to completion (or abort)."""
        if session.state in (State.DESTINATION_CHOSEN, State.COPYING):
            self.copy_phase(session)
        if session.state is State.REMAPPED:
            self.flush_held(session)

    def finish_all(self) -> bool:
        progressed = False
        for session in list(self.sessions.values()):
            if session.active:
                self.finish(session)
                progressed = True
        return progressed

    def run(self, peer_id: str, block_id: int) -> MigrationSession | None:
        session = self.on_evict_request(peer_id, block_id)
        if session is not None and session.active:
            self.finish(session)
        return session

    def abort(self, session: MigrationSession, reason: str = "aborted") -> None:
        if not session.active:
            return
        self._abort(session, reason)

    # failure handling

    def _abort(self, session, reason) -> None:
        """Give up on migrating; the source block still has to go."""
        log.info("migration of slab %d aborted: %s", session.slab_id, reason)
        session.advance(State.ABORTED)
        device = self.device
        slab = session.slab_id
        src_peer, src_block = session.source
        with self.clock.lane(self.lane):
            if session.destination is not None:
                self.placement.release_block(*session.destination)
                session.destination = None
            locations = self.placement.locations(slab) or []
            if len(locations) < 2 and not self.transport.is_failed(src_peer):
                self._spill_to_disk(slab, src_peer, src_block)
            self.placement.drop(slab, session.source)
            try:
                session.messages += 1
                self.transport.send_control(src_peer, {
                    "op": "ABORT", "slab_id": slab, "session_id": session.session_id,
                    "block_id": src_block,
                })
            except (TransportError, MappingError):
                pass
            self.placement.release_block(src_peer, src_block)
        if self.placement.locations(slab) is None:
            device.forget_remote(slab)
        device.resume_slab(slab)
        self._close(session)
        self.stats["aborted"] += 1

    def _source_lost(self, session) -> None:
        src_peer, src_block = session.source
        session.advance(State.ABORTED)
        if session.destination is not None:
            with self.clock.lane(self.lane):
                self.placement.release_block(*session.destination)
        self.device.on_block_lost(src_peer, src_block)
        self.device.resume_slab(session.slab_id)
        self._close(session)
        self.stats["aborted"] += 1

    def _spill_to_disk(self, slab, peer, block) -> None:
        """Copy the slab's remote-only pages to the local disk sink."""
        device = self.device
        if device.disk is None:
            device.disk = DiskSink(device.config.page_size)
        sp = device.config.slab_pages
        start = slab * sp
        end = min(start + sp, device.config.space_pages)
        run: list[int] = []
        for addr in range(start, end + 1):
            wanted = (
                addr < end and device.remote_ready[addr]
                and not (device.fault.disk_backup == "always" and device.disk.has(addr))
            )
            if wanted and (not run or len(run) < self.chunk_pages):
                run.append(addr)
                continue
            if run:
                data = self.transport.read_pages(peer, block, run[0] - start, len(run))
                self.clock.charge("disk_write", device.latency.disk_write)
                device.disk.write(run[0], data)
                self.stats["spilled_pages"] += len(run)
                run = [addr] if wanted else []

    def _close(self, session) -> None:
        self.sessions.pop(session.slab_id, None)
        self.finished.append(session)

    @property
    def active_sessions(self) -> list[MigrationSession]:
        return [s for s in self.sessions.values() if s.active]
