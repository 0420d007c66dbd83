"""Inter-node transfer over TCP through the data hose, with a portable fallback."""

from __future__ import annotations

import dataclasses
import socket
import socketserver
from dataclasses import dataclass

from .core import FLAG_ZERO_COPY, FrameHeader, MemoryRegion
from .delivery import DeliverySink
from .framing import (
    DEFAULT_CHUNK,
    DEFAULT_TIMEOUT,
    Deadline,
    FrameChannel,
    FrameHandler,
    FrameServerMixin,
    recv_exact_into,
)
from .hose import DataHose, close_all, hose_available, pump_in, pump_out, send_chunked
from .wasm_host import InstanceHandle


@dataclass(frozen=True)
class PeerAddress:
    host: str
    port: int
    function_id: int = 0

    @classmethod
    def parse(cls, text: str, function_id: int = 0) -> "PeerAddress":
        host, sep, port = text.strip().rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host.strip("[]"), int(port), function_id)

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


def _use_hose(setting: bool | None) -> bool:
    """``None`` means probe; False forces the fallback."""
    if setting is False:
        return False
    return hose_available()


class NetworkServer(FrameServerMixin, socketserver.ThreadingTCPServer):
    allow_reuse_address = True

    def __init__(self, listen: tuple[str, int], sink: DeliverySink, *, workflow_id: bytes | None = None,
                 hose: bool | None = None, hose_capacity: int | None = None,
                 timeout: float = DEFAULT_TIMEOUT, chunk_size: int = DEFAULT_CHUNK):
        self.zero_copy = _use_hose(hose)
        self.hose_capacity = hose_capacity
        self.setup_frames(sink, workflow_id, timeout, chunk_size)
        socketserver.ThreadingTCPServer.__init__(self, listen, FrameHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_connection(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        super().serve_connection(conn)

    def receive_payload(self, conn, instance: InstanceHandle, region: MemoryRegion, header: FrameHeader):
        if not self.zero_copy:
            recv_exact_into(conn, instance.memory_view(region), self.chunk_size)
            return
        hose = DataHose(self.hose_capacity)
        try:
            pump_in(hose, conn, instance.address_of(region), region.length, Deadline(self.io_timeout))
        finally:
            close_all(hose)


def serve_network(listen_addr: tuple[str, int], sink: DeliverySink, **kwargs) -> NetworkServer:
    """Bind and start a listener thread; ``close()`` stops it."""
    return NetworkServer(listen_addr, sink, **kwargs).start()


class NetworkChannel(FrameChannel):
    """Long-lived connection to one peer; a new hose per transfer."""

    def __init__(self, peer: PeerAddress, *, hose: bool | None = None, hose_capacity: int | None = None,
                 timeout: float = DEFAULT_TIMEOUT, chunk_size: int = DEFAULT_CHUNK):
        super().__init__(timeout)
        self.peer = peer
        self.zero_copy = _use_hose(hose)
        self.hose_capacity = hose_capacity
        self.chunk_size = chunk_size

    def describe(self) -> str:
        return f"tcp:{self.peer}"

    def connect(self) -> socket.socket:
        sock = socket.create_connection((self.peer.host, self.peer.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def prepare_header(self, header: FrameHeader) -> FrameHeader:
        flags = header.flags & ~FLAG_ZERO_COPY
        if self.zero_copy:
            flags |= FLAG_ZERO_COPY
        return dataclasses.replace(header, flags=flags)

    def send_payload(self, sock, source: InstanceHandle, region: MemoryRegion, header: FrameHeader):
        if not header.zero_copy:
            send_chunked(sock, source.memory_view(region), self.chunk_size)
            return
        hose = DataHose(self.hose_capacity)
        try:
            pump_out(hose, source.address_of(region), region.length, sock, Deadline(self.timeout))
        finally:
            close_all(hose)


def send_network(peer: PeerAddress, header: FrameHeader, source: InstanceHandle, region: MemoryRegion,
                 **kwargs) -> FrameHeader:
    """One-shot transfer on a fresh connection; returns the ACK header.

    The ACK's ``flags`` are the receiver's; the path used on the send side
    is ``header.flags`` as rewritten by the channel, exposed through
    :attr:`NetworkChannel.zero_copy`.
    """
    with NetworkChannel(peer, **kwargs) as chan:
        return chan.send(header, source, region)
