"""Length-prefixed binary frames and a TCP backend for the transport.

Frame layout (little-endian): u32 length of everything after it, u8 opcode,
u64 block_id, u32 offset, u32 count, then the payload. Control messages and
their replies carry JSON payloads.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import time
from typing import NamedTuple

from .errors import AllocationRefused, MappingError, TopologyError, TransportError
from .remote import PeerNode
from .transport import Transport

WRITE, READ, CTRL, ACK = 1, 2, 3, 4
OPCODES = (WRITE, READ, CTRL, ACK)
HEADER = struct.Struct("<IBQII")
LEN = struct.Struct("<I")
# count value flagging an error reply
ERROR = 0xFFFFFFFF
MAX_FRAME = 1 << 30

_ERRORS = {
    "MappingError": MappingError,
    "AllocationRefused": AllocationRefused,
    "TopologyError": TopologyError,
}


class Frame(NamedTuple):
    opcode: int
    block_id: int = 0
    offset: int = 0
    count: int = 0
    payload: bytes = b""


def encode(frame: Frame) -> bytes:
    if frame.opcode not in OPCODES:
        raise ValueError(f"bad opcode {frame.opcode}")
    length = HEADER.size - LEN.size + len(frame.payload)
    return HEADER.pack(length, frame.opcode, frame.block_id, frame.offset, frame.count) + bytes(frame.payload)


def decode(buf: bytes) -> tuple[Frame, int]:
    """Parse one frame from the start of ``buf``; returns (frame, bytes used)."""
    if len(buf) < HEADER.size:
        raise ValueError("truncated header")
    length, opcode, block_id, offset, count = HEADER.unpack_from(buf)
    end = LEN.size + length
    if length < HEADER.size - LEN.size or opcode not in OPCODES:
        raise ValueError("malformed frame")
    if len(buf) < end:
        raise ValueError("truncated payload")
    return Frame(opcode, block_id, offset, count, bytes(buf[HEADER.size:end])), end


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock) -> Frame:
    head = _recv_exact(sock, HEADER.size)
    length = LEN.unpack_from(head)[0]
    if length > MAX_FRAME:
        raise ValueError("frame too large")
    rest = _recv_exact(sock, length - (HEADER.size - LEN.size))
    return decode(head + rest)[0]


def send_frame(sock, frame: Frame) -> None:
    sock.sendall(encode(frame))


# server side


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: PeerServer = self.server.owner
        sock = self.request
        with server.lock:
            server.conns.add(sock)
        try:
            self._serve(server, sock)
        finally:
            with server.lock:
                server.conns.discard(sock)

    def _serve(self, server, sock):
        while True:
            try:
                frame = recv_frame(sock)
            except (ConnectionError, OSError, ValueError):
                return
            try:
                reply = server.dispatch(frame)
            except (MappingError, AllocationRefused, TopologyError) as exc:
                body = json.dumps({"type": type(exc).__name__, "message": str(exc)}).encode()
                reply = Frame(ACK, frame.block_id, frame.offset, ERROR, body)
            try:
                send_frame(sock, reply)
            except OSError:
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class PeerServer:
    """Serves one :class:`PeerNode` over TCP. Activity tags use this clock."""

    def __init__(self, node: PeerNode, host: str = "127.0.0.1", port: int = 0, clock=time.monotonic):
        self.node = node
        self.clock = clock
        self.lock = threading.Lock()
        self._server = _TCPServer((host, port), _Handler)
        self._server.owner = self
        self._thread = None
        self.conns: set = set()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "PeerServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self.lock:
            for sock in list(self.conns):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def dispatch(self, frame: Frame) -> Frame:
        node = self.node
        ps = node.page_size
        with self.lock:
            now = self.clock()
            if frame.opcode == WRITE:
                data = frame.payload
                if len(data) != frame.count * ps:
                    raise MappingError("payload size does not match page count")
                pages = [data[i * ps:(i + 1) * ps] for i in range(frame.count)]
                node.write_pages(frame.block_id, frame.offset, pages, now)
                return Frame(ACK, frame.block_id, frame.offset, frame.count)
            if frame.opcode == READ:
                pages = node.read_pages(frame.block_id, frame.offset, frame.count)
                return Frame(ACK, frame.block_id, frame.offset, frame.count, b"".join(pages))
            if frame.opcode == CTRL:
                message = json.loads(frame.payload)
                reply = node.handle_control(message, now)
                return Frame(ACK, payload=json.dumps(reply).encode())
        raise TopologyError(f"unexpected opcode {frame.opcode}")


# client side


class SocketTransport(Transport):
    """Talks to :class:`PeerServer` instances; same charging as in-process.

    Migration copies are relayed through this client (read then write),
    since peers here never open connections to each other.
    """

    def __init__(self, clock, latency, sender_id, addresses: dict, timeout: float = 10.0, **kw):
        super().__init__(clock, latency, sender_id, list(addresses), **kw)
        self.addresses = addresses
        self.timeout = timeout
        self._socks: dict[str, socket.socket] = {}
        self._locks = {pid: threading.Lock() for pid in addresses}

    def _call(self, peer_id: str, frame: Frame) -> Frame:
        sock = self._socks.get(peer_id)
        if sock is None:
            raise TransportError(f"peer {peer_id} not connected", peer_id)
        try:
            with self._locks[peer_id]:
                send_frame(sock, frame)
                reply = recv_frame(sock)
        except (OSError, ConnectionError, ValueError) as exc:
            self.failed.add(peer_id)
            raise TransportError(f"peer {peer_id}: {exc}", peer_id) from None
        if reply.count == ERROR:
            info = json.loads(reply.payload)
            raise _ERRORS.get(info["type"], TransportError)(info["message"])
        return reply

    def _do_connect(self, peer_id):
        try:
            sock = socket.create_connection(self.addresses[peer_id], timeout=self.timeout)
        except OSError as exc:
            self.failed.add(peer_id)
            raise TransportError(f"cannot reach {peer_id}: {exc}", peer_id) from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[peer_id] = sock

    def _do_write(self, peer_id, block_id, offset, pages, now):
        self._call(peer_id, Frame(WRITE, block_id, offset, len(pages), b"".join(pages)))

    def _do_read(self, peer_id, block_id, offset, count):
        reply = self._call(peer_id, Frame(READ, block_id, offset, count))
        ps = self.page_size
        return [reply.payload[i * ps:(i + 1) * ps] for i in range(count)]

    def _do_control(self, peer_id, message):
        reply = self._call(peer_id, Frame(CTRL, payload=json.dumps(message).encode()))
        return json.loads(reply.payload)

    def _do_copy(self, src, src_block, dst, dst_block, first, count, now):
        step = max(1, self.message_size // self.page_size)
        for off in range(first, first + count, step):
            n = min(step, first + count - off)
            pages = self._do_read(src, src_block, off, n)
            self._do_write(dst, dst_block, off, pages, now)

    def close(self) -> None:
        for sock in self._socks.values():
            sock.close()
        self._socks.clear()
