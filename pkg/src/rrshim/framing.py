"""Stream framing shared by the kernel and network planes.

Every message is a 40-byte header followed by ``payload_len`` raw bytes.
The receiver answers each DATA frame with exactly one ACK or ERROR frame.
An ERROR payload is UTF-8 text of the form ``"<ErrorKind>: <detail>"``.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

from .core import (
    HEADER_SIZE,
    U32_MAX,
    FrameHeader,
    MemoryRegion,
    MsgType,
    decode_frame_header,
    encode_frame_header,
)
from .delivery import DeliverySink
from .errors import (
    AllocationFailed,
    BoundsViolation,
    ErrorKind,
    FrameMalformed,
    PeerUnreachable,
    RegistryMiss,
    Timeout,
    TransferError,
)
from .wasm_host import InstanceHandle

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 256 * 1024
DEFAULT_TIMEOUT = 30.0
MAX_ERROR_TEXT = 64 * 1024


class PeerClosed(ConnectionError):
    """The peer closed the stream in the middle of a frame."""


class Deadline:
    def __init__(self, seconds: float | None):
        self.at = None if seconds is None else time.monotonic() + seconds

    def remaining(self) -> float | None:
        if self.at is None:
            return None
        left = self.at - time.monotonic()
        if left <= 0:
            raise Timeout("deadline expired")
        return left


def recv_exact_into(sock: socket.socket, view: memoryview, chunk: int = DEFAULT_CHUNK) -> None:
    got, n = 0, view.nbytes
    while got < n:
        k = sock.recv_into(view[got:got + chunk], min(chunk, n - got))
        if k == 0:
            raise PeerClosed(f"stream closed after {got} of {n} bytes")
        got += k


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    recv_exact_into(sock, memoryview(buf))
    return bytes(buf)


def read_header(sock: socket.socket, idle_ok: bool = False) -> FrameHeader | None:
    """Read one header; ``None`` on a clean EOF before its first byte."""
    buf = bytearray(HEADER_SIZE)
    view = memoryview(buf)
    got = 0
    while got < HEADER_SIZE:
        try:
            k = sock.recv_into(view[got:])
        except socket.timeout:
            if got == 0 and idle_ok:
                continue
            raise
        if k == 0:
            if got == 0:
                return None
            raise PeerClosed(f"stream closed inside a header ({got} bytes)")
        got += k
    return decode_frame_header(buf)


def send_header(sock: socket.socket, header: FrameHeader) -> None:
    sock.sendall(encode_frame_header(header))


def send_error(sock: socket.socket, request: FrameHeader | None, err: TransferError) -> None:
    text = f"{err.kind.value}: {err.detail}".encode("utf-8")[:MAX_ERROR_TEXT]
    base = request or FrameHeader(MsgType.DATA)
    sock.sendall(encode_frame_header(base.reply(MsgType.ERROR, len(text))) + text)


def read_reply(sock: socket.socket) -> FrameHeader:
    """Wait for the ACK to a DATA frame; turn ERROR frames into exceptions."""
    reply = read_header(sock)
    if reply is None:
        raise PeerClosed("peer closed before acknowledging")
    if reply.msg_type == MsgType.ACK:
        return reply
    if reply.msg_type == MsgType.ERROR:
        if reply.payload_len > MAX_ERROR_TEXT:
            raise FrameMalformed("oversized ERROR frame")
        text = recv_exact(sock, reply.payload_len).decode("utf-8", "replace")
        kind_name, _, detail = text.partition(": ")
        try:
            kind = ErrorKind(kind_name)
        except ValueError:
            kind, detail = ErrorKind.FrameMalformed, text
        raise TransferError.of(kind, f"peer: {detail}")
    raise FrameMalformed(f"expected ACK, got {reply.msg_type.name}")


# -- receive side -------------------------------------------------------------

class FrameHandler(socketserver.BaseRequestHandler):
    server: "FrameServerMixin"

    def handle(self):
        self.server.serve_connection(self.request)


class FrameServerMixin:
    """Accept loop plus the per-frame delivery state machine.

    Subclasses provide :meth:`receive_payload`, which must land exactly
    ``region.length`` bytes into the sink instance or raise.
    """

    daemon_threads = True
    block_on_close = False

    def setup_frames(self, sink: DeliverySink, workflow_id: bytes | None, timeout: float,
                     chunk_size: int):
        self.sink = sink
        self.workflow_id = workflow_id
        self.io_timeout = timeout
        self.chunk_size = chunk_size
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._closed = False

    def receive_payload(self, conn: socket.socket, instance: InstanceHandle,
                        region: MemoryRegion, header: FrameHeader) -> None:
        raise NotImplementedError

    # lifecycle

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, name=type(self).__name__,
                                        kwargs={"poll_interval": 0.1}, daemon=True)
        self._thread.start()
        return self

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self._thread is not None:
            self.shutdown()
            self._thread.join()
        self.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self.after_close()

    def after_close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # per connection

    def serve_connection(self, conn: socket.socket) -> None:
        with self._conns_lock:
            self._conns.add(conn)
        conn.settimeout(self.io_timeout)
        try:
            while not self._closed:
                if not self._serve_frame(conn):
                    break
        finally:
            with self._conns_lock:
                self._conns.discard(conn)

    def _serve_frame(self, conn: socket.socket) -> bool:
        """Handle one frame; False ends the connection."""
        header = None
        try:
            header = read_header(conn, idle_ok=True)
            if header is None:
                return False
            if header.msg_type == MsgType.REGISTER:
                send_header(conn, header.reply(MsgType.ACK))
                return True
            if header.msg_type != MsgType.DATA:
                raise FrameMalformed(f"unexpected {header.msg_type.name} frame")
            self._check_routing(header)
            if header.payload_len == 0:
                send_error(conn, header, BoundsViolation("DATA frame with empty payload"))
                return True
            if header.payload_len > U32_MAX:
                raise AllocationFailed(f"payload of {header.payload_len} bytes exceeds wasm32 memory")
            self._deliver(conn, header)
            send_header(conn, header.reply(MsgType.ACK))
            return True
        except (FrameMalformed, AllocationFailed, RegistryMiss) as err:
            # the stream position is unknown past this point: report and drop
            log.info("dropping connection: %s", err)
            self._try_send_error(conn, header, err)
            return False
        except TransferError as err:
            self._try_send_error(conn, header, err)
            return False
        except (PeerClosed, socket.timeout, OSError) as exc:
            log.info("connection ended mid-frame: %s", exc)
            if isinstance(exc, socket.timeout):
                self._try_send_error(conn, header, Timeout("payload did not arrive in time"))
            return False

    def _check_routing(self, header: FrameHeader) -> None:
        if self.workflow_id is not None and header.workflow_id != self.workflow_id:
            raise RegistryMiss("frame belongs to another workflow")
        fid = self.sink.function_id
        if fid and header.target_fn != fid:
            raise RegistryMiss(f"no function {header.target_fn} behind this endpoint")

    def _deliver(self, conn: socket.socket, header: FrameHeader) -> None:
        sink = self.sink
        with sink.lock:
            region = sink.reserve(header.payload_len)
            try:
                self.receive_payload(conn, sink.instance, region, header)
            except BaseException:
                sink.abort(region)
                raise
            sink.commit(region, source_fn=header.source_fn)

    @staticmethod
    def _try_send_error(conn, header, err):
        try:
            send_error(conn, header, err)
        except OSError:
            pass


# -- send side ----------------------------------------------------------------

def _pending_error(sock: socket.socket) -> TransferError | None:
    """An ERROR frame already queued on ``sock``, if there is one."""
    try:
        sock.settimeout(0.5)
        read_reply(sock)
    except TransferError as err:
        return err
    except (OSError, PeerClosed):
        pass
    return None


class FrameChannel:
    """A reusable connection to one peer, strictly one transfer at a time."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def connect(self) -> socket.socket:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def send_payload(self, sock: socket.socket, source: InstanceHandle, region: MemoryRegion,
                     header: FrameHeader) -> None:
        raise NotImplementedError

    def prepare_header(self, header: FrameHeader) -> FrameHeader:
        return header

    def _ensure(self) -> tuple[socket.socket, bool]:
        if self._sock is not None:
            return self._sock, True
        try:
            sock = self.connect()
        except socket.timeout:
            raise PeerUnreachable(f"connect to {self.describe()} timed out") from None
        except OSError as exc:
            raise PeerUnreachable(f"cannot reach {self.describe()}: {exc.strerror or exc}") from None
        sock.settimeout(self.timeout)
        self._sock = sock
        return sock, False

    def send(self, header: FrameHeader, source: InstanceHandle, region: MemoryRegion) -> FrameHeader:
        if header.msg_type != MsgType.DATA:
            raise FrameMalformed("only DATA frames carry payloads")
        if header.payload_len != region.length:
            raise FrameMalformed("payload_len does not match the region")
        if region.length == 0:
            raise BoundsViolation("empty region cannot be transferred")
        source.check_bounds(region)
        header = self.prepare_header(header)
        with self._lock, source.lock:
            sock, reused = self._ensure()
            try:
                send_header(sock, header)
            except OSError:
                if not reused:
                    self.close()
                    raise PeerUnreachable(f"{self.describe()} refused the header") from None
                # stale pooled connection: reconnect once, no payload has moved yet
                self.close()
                sock, _ = self._ensure()
                try:
                    send_header(sock, header)
                except OSError as exc:
                    self.close()
                    raise PeerUnreachable(f"{self.describe()}: {exc}") from None
            try:
                try:
                    self.send_payload(sock, source, region, header)
                except (BrokenPipeError, ConnectionResetError):
                    # the peer may have refused the frame and hung up mid-payload
                    pending = _pending_error(sock)
                    if pending is None:
                        raise
                    self.close()
                    raise pending from None
                return read_reply(sock)
            except socket.timeout:
                self.close()
                raise Timeout(f"{self.describe()} did not acknowledge within {self.timeout}s") from None
            except (PeerClosed, BrokenPipeError, ConnectionResetError) as exc:
                self.close()
                raise PeerUnreachable(f"{self.describe()} dropped the transfer: {exc}") from None
            except TransferError as err:
                if err.kind in (ErrorKind.FrameMalformed, ErrorKind.AllocationFailed,
                                ErrorKind.RegistryMiss, ErrorKind.Timeout):
                    self.close()
                raise

    def close(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
