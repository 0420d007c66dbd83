"""Kernel pipe "data hose" between linear memory and a socket.

Send side: ``vmsplice`` maps pages of the source region into the pipe, then
``splice`` moves them from the pipe into the socket. Receive side:
``splice`` drains the socket into the pipe, then ``vmsplice`` on the read end
lands the bytes in the destination region. Each round moves at most one
pipe's worth of data.

The syscalls are Linux-only. :func:`hose_available` probes for them once;
callers fall back to plain chunked socket I/O when it returns False.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import errno
import fcntl
import os
import select
import socket
import threading

from .errors import HoseUnavailable
from .framing import Deadline, PeerClosed

F_SETPIPE_SZ = 1031
F_GETPIPE_SZ = 1032
SPLICE_F_MOVE = 1
SPLICE_F_MORE = 4


class _IoVec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


def _load_vmsplice():
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
        fn = libc.vmsplice
    except (OSError, AttributeError):
        return None
    fn.argtypes = [ctypes.c_int, ctypes.POINTER(_IoVec), ctypes.c_size_t, ctypes.c_uint]
    fn.restype = ctypes.c_ssize_t
    return fn


_vmsplice = _load_vmsplice()
_probe_lock = threading.Lock()
_probe_result: bool | None = None


def vmsplice(fd: int, address: int, length: int) -> int:
    iov = _IoVec(address, length)
    while True:
        n = _vmsplice(fd, ctypes.byref(iov), 1, 0)
        if n >= 0:
            return n
        err = ctypes.get_errno()
        if err != errno.EINTR:
            raise OSError(err, os.strerror(err))


def hose_available() -> bool:
    """True when vmsplice and splice both work on this host."""
    global _probe_result
    with _probe_lock:
        if _probe_result is None:
            _probe_result = _probe()
        return _probe_result


def _probe() -> bool:
    if _vmsplice is None or not hasattr(os, "splice"):
        return False
    buf = ctypes.create_string_buffer(b"probe", 5)
    r = w = None
    a, b = socket.socketpair()
    try:
        r, w = os.pipe()
        if vmsplice(w, ctypes.addressof(buf), 5) != 5:
            return False
        if os.splice(r, a.fileno(), 5) != 5:
            return False
        return b.recv(5) == b"probe"
    except OSError:
        return False
    finally:
        for fd in (r, w):
            if fd is not None:
                os.close(fd)
        a.close()
        b.close()


class DataHose:
    """One kernel pipe, created per transfer and released by :func:`close_all`."""

    def __init__(self, capacity: int | None = None):
        if not hose_available():
            raise HoseUnavailable("vmsplice/splice not supported on this host")
        self.read_fd, self.write_fd = os.pipe()
        if capacity:
            try:
                fcntl.fcntl(self.write_fd, F_SETPIPE_SZ, capacity)
            except OSError:
                pass  # keep the platform default
        self.capacity = fcntl.fcntl(self.write_fd, F_GETPIPE_SZ)
        self.closed = False

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for fd in (self.read_fd, self.write_fd):
            try:
                os.close(fd)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def close_all(hose: DataHose | None, sock: socket.socket | None = None) -> None:
    """Release the hose and, when given, the transfer's socket. Idempotent."""
    if hose is not None:
        hose.close()
    if sock is not None:
        try:
            sock.close()
        except OSError:
            pass


def _wait(fd: int, event: int, deadline: Deadline) -> None:
    left = deadline.remaining()
    poller = select.poll()
    poller.register(fd, event)
    if not poller.poll(None if left is None else max(int(left * 1000), 1)):
        deadline.remaining()


def _splice(src: int, dst: int, count: int, wait_fd: int, event: int, deadline: Deadline,
            more: bool = False) -> int:
    # SPLICE_F_MORE corks the socket; never set it on the final segment
    flags = SPLICE_F_MOVE | (SPLICE_F_MORE if more else 0)
    while True:
        try:
            return os.splice(src, dst, count, flags=flags)
        except BlockingIOError:
            _wait(wait_fd, event, deadline)
        except InterruptedError:
            continue


def pump_out(hose: DataHose, address: int, length: int, sock: socket.socket,
             deadline: Deadline) -> None:
    """Move ``length`` bytes at ``address`` into ``sock`` through the hose."""
    fd = sock.fileno()
    sent = 0
    while sent < length:
        mapped = vmsplice(hose.write_fd, address + sent, min(hose.capacity, length - sent))
        drained = 0
        last = sent + mapped >= length
        while drained < mapped:
            drained += _splice(hose.read_fd, fd, mapped - drained, fd, select.POLLOUT, deadline,
                               more=not last)
        sent += mapped


def pump_in(hose: DataHose, sock: socket.socket, address: int, length: int,
            deadline: Deadline) -> None:
    """Land exactly ``length`` bytes from ``sock`` at ``address`` through the hose."""
    fd = sock.fileno()
    got = 0
    while got < length:
        filled = _splice(fd, hose.write_fd, min(hose.capacity, length - got), fd, select.POLLIN, deadline)
        if filled == 0:
            raise PeerClosed(f"stream closed after {got} of {length} bytes")
        landed = 0
        while landed < filled:
            landed += vmsplice(hose.read_fd, address + got + landed, filled - landed)
        got += filled


def send_chunked(sock: socket.socket, view: memoryview, chunk: int) -> None:
    for start in range(0, view.nbytes, chunk):
        sock.sendall(view[start:start + chunk])
