"""Same-host transfer between two shims over a Unix stream socket.

The sender writes the header and then hands the source region to the kernel
as-is; the receiver reads straight from the socket into a freshly allocated
region of the target's linear memory.
"""

from __future__ import annotations

import os
import socket
import socketserver
from dataclasses import dataclass
from pathlib import Path

from .core import FrameHeader, MemoryRegion
from .delivery import DeliverySink
from .framing import (
    DEFAULT_CHUNK,
    DEFAULT_TIMEOUT,
    FrameChannel,
    FrameServerMixin,
    FrameHandler,
    recv_exact_into,
)
from .wasm_host import InstanceHandle

RUNTIME_DIR_ENV = "RRSHIM_RUNTIME_DIR"


def default_runtime_dir() -> Path:
    env = os.environ.get(RUNTIME_DIR_ENV)
    if env:
        return Path(env)
    return Path(f"/tmp/rrshim-{os.getuid()}")


def endpoint_path(runtime_dir: Path | str, workflow_id: bytes, function_id: int) -> Path:
    return Path(runtime_dir) / workflow_id.hex() / f"{function_id}.sock"


@dataclass(frozen=True)
class LocalEndpoint:
    path: Path
    function_id: int

    @classmethod
    def for_function(cls, runtime_dir: Path | str, workflow_id: bytes, function_id: int) -> "LocalEndpoint":
        return cls(endpoint_path(runtime_dir, workflow_id, function_id), function_id)


class KernelServer(FrameServerMixin, socketserver.ThreadingUnixStreamServer):
    def __init__(self, endpoint: LocalEndpoint, sink: DeliverySink, *, workflow_id: bytes | None = None,
                 timeout: float = DEFAULT_TIMEOUT, chunk_size: int = DEFAULT_CHUNK):
        self.endpoint = endpoint
        path = Path(endpoint.path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.is_socket():
            path.unlink()
        self.setup_frames(sink, workflow_id, timeout, chunk_size)
        socketserver.ThreadingUnixStreamServer.__init__(self, str(path), FrameHandler)

    def receive_payload(self, conn, instance: InstanceHandle, region: MemoryRegion, header: FrameHeader):
        recv_exact_into(conn, instance.memory_view(region), self.chunk_size)

    def after_close(self):
        path = Path(self.endpoint.path)
        try:
            path.unlink()
        except FileNotFoundError:
            pass
        try:
            path.parent.rmdir()  # only succeeds once the last endpoint is gone
        except OSError:
            pass


def serve_kernel(endpoint: LocalEndpoint, sink: DeliverySink, **kwargs) -> KernelServer:
    """Start a listener in a background thread; ``close()`` stops it."""
    return KernelServer(endpoint, sink, **kwargs).start()


class KernelChannel(FrameChannel):
    def __init__(self, endpoint: LocalEndpoint, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(timeout)
        self.endpoint = endpoint

    def describe(self) -> str:
        return f"unix:{self.endpoint.path}"

    def connect(self) -> socket.socket:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(self.timeout)
        try:
            sock.connect(str(self.endpoint.path))
        except OSError:
            sock.close()
            raise
        return sock

    def send_payload(self, sock, source: InstanceHandle, region: MemoryRegion, header: FrameHeader):
        # the kernel copies straight out of linear memory; no user-space staging
        sock.sendall(source.memory_view(region))


def send_kernel(endpoint: LocalEndpoint, header: FrameHeader, source: InstanceHandle,
                region: MemoryRegion, timeout: float = DEFAULT_TIMEOUT) -> FrameHeader:
    """One-shot transfer over a fresh connection; returns the ACK header."""
    with KernelChannel(endpoint, timeout) as chan:
        return chan.send(header, source, region)
