"""Domain values, the 40-byte frame codec and the FNV-1a integrity checksum."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BoundsViolation, FrameMalformed

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

MAGIC = b"RRNR"
VERSION = 1
HEADER_SIZE = 40
WORKFLOW_ID_SIZE = 16
U32_MAX = 0xFFFF_FFFF
U64_MAX = 0xFFFF_FFFF_FFFF_FFFF

FLAG_ZERO_COPY = 0x0001

FNV64_OFFSET = 14695981039346656037
FNV64_PRIME = 1099511628211

# magic, version, msg_type, flags, workflow_id, source_fn, target_fn, payload_len
_HEADER = struct.Struct("<4sBBH16sIIQ")
assert _HEADER.size == HEADER_SIZE


class MsgType(enum.IntEnum):
    DATA = 1
    ACK = 2
    REGISTER = 3
    ERROR = 4


@dataclass(frozen=True)
class MemoryRegion:
    """An ``(offset, length)`` window into one instance's linear memory."""

    offset: int
    length: int

    def __post_init__(self):
        if not 0 <= self.offset <= U32_MAX:
            raise BoundsViolation(f"offset {self.offset} is not a u32")
        if not 0 <= self.length <= U64_MAX:
            raise BoundsViolation(f"length {self.length} is not a u64")

    @property
    def end(self) -> int:
        return self.offset + self.length

    def overlaps(self, other: "MemoryRegion") -> bool:
        return self.offset < other.end and other.offset < self.end


@dataclass(frozen=True)
class FrameHeader:
    msg_type: MsgType
    workflow_id: bytes = bytes(WORKFLOW_ID_SIZE)
    source_fn: int = 0
    target_fn: int = 0
    payload_len: int = 0
    flags: int = 0
    version: int = VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        if len(self.workflow_id) != WORKFLOW_ID_SIZE:
            raise ValueError("workflow_id must be 16 bytes")
        if not 0 <= self.flags <= 0xFFFF:
            raise ValueError("flags must fit in 16 bits")
        for name in ("source_fn", "target_fn"):
            if not 0 <= getattr(self, name) <= U32_MAX:
                raise ValueError(f"{name} must fit in 32 bits")
        if not 0 <= self.payload_len <= U64_MAX:
            raise ValueError("payload_len must fit in 64 bits")

    @property
    def zero_copy(self) -> bool:
        return bool(self.flags & FLAG_ZERO_COPY)

    def reply(self, msg_type: MsgType, payload_len: int = 0) -> "FrameHeader":
        """Header travelling back from target to source."""
        return FrameHeader(
            msg_type=msg_type,
            workflow_id=self.workflow_id,
            source_fn=self.target_fn,
            target_fn=self.source_fn,
            payload_len=payload_len,
        )


def encode_frame_header(header: FrameHeader) -> bytes:
    return _HEADER.pack(
        header.magic,
        header.version,
        int(header.msg_type),
        header.flags,
        bytes(header.workflow_id),
        header.source_fn,
        header.target_fn,
        header.payload_len,
    )


def decode_frame_header(data: bytes | bytearray | memoryview) -> FrameHeader:
    if len(data) != HEADER_SIZE:
        raise FrameMalformed(f"header must be {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, msg_type, flags, wf, src, dst, plen = _HEADER.unpack(data)
    if magic != MAGIC:
        raise FrameMalformed(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameMalformed(f"unsupported version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameMalformed(f"unknown msg_type {msg_type}") from None
    return FrameHeader(
        msg_type=kind,
        workflow_id=wf,
        source_fn=src,
        target_fn=dst,
        payload_len=plen,
        flags=flags,
    )


def _fnv1a_py(data) -> int:
    h = FNV64_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * FNV64_PRIME) & U64_MAX
    return h


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _fnv1a_jit(buf):
        h = np.uint64(FNV64_OFFSET)
        prime = np.uint64(FNV64_PRIME)
        for i in range(buf.shape[0]):
            h = (h ^ np.uint64(buf[i])) * prime
        return h

else:  # pragma: no cover
    _fnv1a_jit = None

# below this size the interpreter loop beats the JIT call overhead
_JIT_THRESHOLD = 256


def checksum64(data) -> int:
    """FNV-1a 64-bit over ``data`` (any buffer-protocol object)."""
    view = memoryview(data).cast("B")
    if _fnv1a_jit is None or view.nbytes < _JIT_THRESHOLD:
        return _fnv1a_py(view)
    return int(_fnv1a_jit(np.frombuffer(view, dtype=np.uint8)))
