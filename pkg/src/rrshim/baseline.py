"""Serialized comparison path: JSON envelope with a base64 payload.

Wire format: an 8-byte little-endian length, then that many bytes of UTF-8
envelope text. The receiver answers with one status byte (0 = delivered).
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

from .core import MemoryRegion
from .delivery import Delivery, DeliverySink
from .errors import FrameMalformed, PeerUnreachable, Timeout, TransferError
from .framing import DEFAULT_TIMEOUT, FrameHandler, FrameServerMixin, PeerClosed, recv_exact, recv_exact_into
from .wasm_host import InstanceHandle

log = logging.getLogger(__name__)

_LEN = struct.Struct("<Q")
STATUS_OK = 0
STATUS_DECODE_ERROR = 1
STATUS_DELIVERY_ERROR = 2
MAX_MESSAGE = 1 << 34


@dataclass(frozen=True)
class SerializedMessage:
    text: str

    def encode(self) -> bytes:
        return self.text.encode("ascii")


def serialize(payload, src: int, dst: int) -> SerializedMessage:
    body = base64.b64encode(payload).decode("ascii")
    return SerializedMessage(json.dumps({"src": src, "dst": dst, "payload": body}))


def deserialize(msg: SerializedMessage | str | bytes) -> bytes:
    text = msg.text if isinstance(msg, SerializedMessage) else msg
    try:
        doc = json.loads(text)
        return base64.b64decode(doc["payload"], validate=True)
    except (ValueError, KeyError, TypeError, binascii.Error) as exc:
        raise FrameMalformed(f"cannot decode serialized message: {exc}") from None


def envelope_overhead(src: int, dst: int) -> int:
    return len(serialize(b"", src, dst).text)


@dataclass(frozen=True)
class BaselineTimings:
    t_locate: float
    t_serialize: float
    t_transfer: float
    t_deserialize: float
    t_total: float


class BaselineServer(FrameServerMixin, socketserver.ThreadingTCPServer):
    """Receives envelopes, decodes them and writes the bytes into the sink."""

    allow_reuse_address = True

    def __init__(self, listen: tuple[str, int], sink: DeliverySink, timeout: float = DEFAULT_TIMEOUT):
        self.setup_frames(sink, None, timeout, 0)
        self.last_deserialize = 0.0
        self._timing_lock = threading.Lock()
        socketserver.ThreadingTCPServer.__init__(self, listen, FrameHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_connection(self, conn):
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._conns_lock:
            self._conns.add(conn)
        conn.settimeout(self.io_timeout)
        try:
            while not self._closed and self._serve_message(conn):
                pass
        finally:
            with self._conns_lock:
                self._conns.discard(conn)

    def _serve_message(self, conn) -> bool:
        try:
            head = conn.recv(_LEN.size, socket.MSG_WAITALL)
            if not head:
                return False
            if len(head) < _LEN.size:
                return False
            (n,) = _LEN.unpack(head)
            if n > MAX_MESSAGE:
                conn.sendall(bytes([STATUS_DECODE_ERROR]))
                return False
            buf = bytearray(n)
            recv_exact_into(conn, memoryview(buf))
        except (PeerClosed, OSError) as exc:
            log.info("baseline connection ended: %s", exc)
            return False

        t0 = time.perf_counter()
        try:
            payload = deserialize(buf.decode("ascii", "replace"))
        except FrameMalformed as err:
            log.info("rejecting message: %s", err)
            conn.sendall(bytes([STATUS_DECODE_ERROR]))
            return True
        t_deser = time.perf_counter() - t0
        with self._timing_lock:
            self.last_deserialize = t_deser
        del buf

        status = STATUS_OK
        try:
            self._land(payload)
        except TransferError as err:
            log.info("baseline delivery failed: %s", err)
            status = STATUS_DELIVERY_ERROR
        conn.sendall(bytes([status]))
        return True

    def _land(self, payload: bytes) -> Delivery:
        sink = self.sink
        with sink.lock:
            region = sink.reserve(len(payload))
            try:
                sink.instance.write_memory_host(payload, region.offset)
            except BaseException:
                sink.abort(region)
                raise
            return sink.commit(region)


class BaselineClient:
    """Source side. Keeps one connection, like a pooled HTTP client."""

    def __init__(self, address: tuple[str, int], timeout: float = DEFAULT_TIMEOUT):
        self.address = address
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _ensure(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise PeerUnreachable(f"cannot reach {self.address}: {exc}") from None
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def send_message(self, msg: bytes) -> int:
        sock = self._ensure()
        try:
            sock.sendall(_LEN.pack(len(msg)))
            sock.sendall(msg)
            status = recv_exact(sock, 1)[0]
        except socket.timeout:
            self.close()
            raise Timeout(f"baseline peer {self.address} did not answer") from None
        except (PeerClosed, OSError) as exc:
            self.close()
            raise PeerUnreachable(f"baseline peer {self.address}: {exc}") from None
        return status

    def close(self):
        sock, self._sock = self._sock, None
        if sock is not None:
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def baseline_transfer(client: BaselineClient, server: BaselineServer | None, source: InstanceHandle,
                      region: MemoryRegion, src: int = 0, dst: int = 0) -> BaselineTimings:
    """Copy out, serialize, ship, deserialize, write; phases share one clock.

    ``server`` is the in-process receiver on loopback; its decode time is
    subtracted from the round trip so the transfer phase excludes it.
    """
    t0 = time.perf_counter()
    source.check_bounds(region)
    t1 = time.perf_counter()
    # copying out of the VM is part of the serialization cost
    with source.lock:
        data = source.read_memory_host(region)
    wire = serialize(data, src, dst).encode()
    del data
    t2 = time.perf_counter()
    status = client.send_message(wire)
    t3 = time.perf_counter()
    if status == STATUS_DECODE_ERROR:
        raise FrameMalformed("baseline peer could not decode the message")
    if status != STATUS_OK:
        raise TransferError.of(FrameMalformed.kind, f"baseline peer status {status}")
    t_deser = server.last_deserialize if server is not None else 0.0
    return BaselineTimings(
        t_locate=t1 - t0,
        t_serialize=t2 - t1,
        t_transfer=(t3 - t2) - t_deser,
        t_deserialize=t_deser,
        t_total=t3 - t0,
    )
