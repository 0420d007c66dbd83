"""Independent reference implementations used as test oracles.

Nothing here imports the package under test. Each function is written
straight from the published definition of the thing it checks.
"""

from __future__ import annotations

import math

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
MASK64 = 2**64 - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) % 2**64
    return h


def lcg_bytes(seed: int, n: int) -> bytes:
    """64-bit LCG, one output byte per step taken from the top 8 bits."""
    state = seed % 2**64
    out = []
    for _ in range(n):
        state = (state * 6364136223846793005 + 1442695040888963407) % 2**64
        out.append(state // 2**56)
    return bytes(out)


def header_bytes(magic: bytes, version: int, msg_type: int, flags: int, workflow: bytes,
                 src: int, dst: int, payload_len: int) -> bytes:
    """Hand-laid 40-byte header: every integer little-endian, fields in wire order."""
    out = bytearray()
    out += magic
    out.append(version)
    out.append(msg_type)
    out += bytes([flags & 0xFF, flags >> 8])
    out += workflow
    for value, width in ((src, 4), (dst, 4), (payload_len, 8)):
        out += bytes((value >> (8 * i)) & 0xFF for i in range(width))
    return bytes(out)


def parse_header_bytes(raw: bytes) -> dict:
    """Byte-level decoder that shares no code with the package codec."""
    def le(lo, hi):
        return sum(raw[i] << (8 * (i - lo)) for i in range(lo, hi))
    return {
        "magic": raw[0:4], "version": raw[4], "msg_type": raw[5], "flags": le(6, 8),
        "workflow_id": raw[8:24], "source_fn": le(24, 28), "target_fn": le(28, 32),
        "payload_len": le(32, 40),
    }


def base64_length(n: int) -> int:
    return 4 * math.ceil(n / 3)


def mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def sample_std(xs) -> float:
    xs = list(xs)
    if len(xs) < 2:
        return 0.0
    m = mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))
