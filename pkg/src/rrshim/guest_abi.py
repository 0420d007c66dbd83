"""Guest-side contract, the sample guests, and the payload generator oracle.

A conformant guest exports ``memory``, ``allocate_memory``,
``deallocate_memory``, ``run`` and ``checksum`` with the signatures in
:data:`REQUIRED_EXPORTS`, and imports nothing but
``roadrunner.send_to_host``. Extra exports are allowed.

The sample guests are kept as WAT under ``guests/`` and assembled into
``guests/*.wasm`` by :func:`build_guests`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import wasmtime

from .errors import GuestAbiMissing

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

GUEST_DIR = Path(__file__).parent / "guests"
SAMPLE_GUESTS = ("echo", "producer", "consumer")

HOST_NAMESPACE = "roadrunner"
MAILBOX_OFFSET = 8
MAILBOX_LENGTH = 12
HEAP_BASE = 1024

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1

_I32 = "i32"
_I64 = "i64"

# name -> (params, results)
REQUIRED_EXPORTS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "allocate_memory": ((_I32,), (_I32,)),
    "deallocate_memory": ((_I32,), ()),
    "run": ((), ()),
    "checksum": ((_I32, _I32), (_I64,)),
}
REQUIRED_IMPORTS: dict[tuple[str, str], tuple[tuple[str, ...], tuple[str, ...]]] = {
    (HOST_NAMESPACE, "send_to_host"): ((_I32, _I32), ()),
}


@dataclass
class AbiReport:
    """Outcome of a static conformance check."""

    missing: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)
    foreign_imports: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.mismatched or self.foreign_imports)

    def problems(self) -> list[str]:
        out = [f"missing export {n}" for n in self.missing]
        out += [f"signature mismatch: {m}" for m in self.mismatched]
        out += [f"import outside the ABI: {i}" for i in self.foreign_imports]
        return out


def _sig(ft: wasmtime.FuncType) -> tuple[tuple[str, ...], tuple[str, ...]]:
    return tuple(str(p) for p in ft.params), tuple(str(r) for r in ft.results)


def inspect_module(module: wasmtime.Module) -> AbiReport:
    report = AbiReport()
    exports = {e.name: e.type for e in module.exports}

    mem = exports.get("memory")
    if not isinstance(mem, wasmtime.MemoryType):
        report.missing.append("memory")
    for name, want in REQUIRED_EXPORTS.items():
        ty = exports.get(name)
        if ty is None:
            report.missing.append(name)
        elif not isinstance(ty, wasmtime.FuncType) or _sig(ty) != want:
            report.mismatched.append(f"{name} expected {want}")

    for imp in module.imports:
        key = (imp.module, imp.name)
        want = REQUIRED_IMPORTS.get(key)
        if want is None or not isinstance(imp.type, wasmtime.FuncType) or _sig(imp.type) != want:
            report.foreign_imports.append(f"{imp.module}.{imp.name}")
    return report


def check_abi(source: bytes | str | Path, engine: wasmtime.Engine | None = None) -> AbiReport:
    """Statically check a module; raise :class:`GuestAbiMissing` on failure."""
    binary = Path(source).read_bytes() if isinstance(source, (str, Path)) else source
    try:
        module = wasmtime.Module(engine or wasmtime.Engine(), binary)
    except wasmtime.WasmtimeError as exc:
        raise GuestAbiMissing(f"not a valid wasm module: {exc}") from None
    report = inspect_module(module)
    if not report.ok:
        raise GuestAbiMissing("; ".join(report.problems()))
    return report


# -- sample guests ----------------------------------------------------------

_INCLUDE = re.compile(r"^\s*;;\s*@include\s+(\S+)\s*$", re.MULTILINE)


def guest_source(name: str) -> str:
    text = (GUEST_DIR / f"{name}.wat").read_text()
    return _INCLUDE.sub(lambda m: (GUEST_DIR / m.group(1)).read_text(), text)


def build_guests(out_dir: Path | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir or GUEST_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    built = {}
    for name in SAMPLE_GUESTS:
        path = out_dir / f"{name}.wasm"
        path.write_bytes(wasmtime.wat2wasm(guest_source(name)))
        built[name] = path
    return built


def guest_path(name: str) -> Path:
    path = GUEST_DIR / f"{name}.wasm"
    if not path.exists():
        build_guests()
    return path


def guest_binary(name: str) -> bytes:
    return guest_path(name).read_bytes()


# -- payload generator oracle ------------------------------------------------

def reference_generator(seed: int, n: int) -> bytes:
    """Byte-at-a-time reference for the producer guest's payload."""
    s = seed & _MASK64
    out = bytearray(n)
    for i in range(n):
        s = (s * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64
        out[i] = s >> 56
    return bytes(out)


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _lcg_fill(out, seed):
        s = np.uint64(seed)
        a = np.uint64(LCG_MULTIPLIER)
        c = np.uint64(LCG_INCREMENT)
        shift = np.uint64(56)
        for i in range(out.shape[0]):
            s = s * a + c
            out[i] = np.uint8(s >> shift)

else:  # pragma: no cover
    _lcg_fill = None


def generate_payload(seed: int, n: int) -> np.ndarray:
    """Same stream as :func:`reference_generator`, fast enough for 100 MiB."""
    out = np.empty(n, dtype=np.uint8)
    if _lcg_fill is None or n < 4096:
        out[:] = np.frombuffer(reference_generator(seed, n), dtype=np.uint8)
    else:
        _lcg_fill(out, seed & _MASK64)
    return out
