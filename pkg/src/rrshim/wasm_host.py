"""Embedding boundary around the Wasm engine.

:class:`WasmHost` owns the engine and the set of live instances. Each
:class:`InstanceHandle` has its own store, so no operation on one instance
can reach another instance's linear memory.

Operations on one instance are not thread safe. Callers serialize them,
typically by holding :attr:`InstanceHandle.lock`.
"""

from __future__ import annotations

import bisect
import ctypes
import itertools
import threading
from dataclasses import dataclass
from pathlib import Path

import wasmtime

from . import guest_abi
from .core import MemoryRegion, U32_MAX
from .errors import AllocationFailed, BoundsViolation, GuestAbiMissing, TransferError

PAGE_SIZE = 65536
DEFAULT_MAX_MEMORY = 512 * 1024 * 1024


@dataclass(frozen=True)
class HostCallCapture:
    """The descriptor a guest handed to ``send_to_host``."""

    region: MemoryRegion
    instance_id: int
    sequence_no: int


class _GuestReject(Exception):
    """Raised inside ``send_to_host`` to unwind the guest."""


class InstanceHandle:
    def __init__(self, host: "WasmHost", instance_id: int, module: wasmtime.Module,
                 max_memory: int, workflow_id: bytes | None, name: str | None):
        self.instance_id = instance_id
        self.workflow_id = workflow_id
        self.name = name or f"instance-{instance_id}"
        self.lock = threading.RLock()
        self._host = host
        self._captures: list[HostCallCapture] = []
        self._seq = itertools.count()
        self._live_offsets: list[int] = []
        self._live: dict[int, int] = {}

        self._store = wasmtime.Store(host.engine)
        self._store.set_limits(memory_size=max_memory)
        linker = wasmtime.Linker(host.engine)
        linker.define_func(
            guest_abi.HOST_NAMESPACE,
            "send_to_host",
            wasmtime.FuncType([wasmtime.ValType.i32(), wasmtime.ValType.i32()], []),
            self._send_to_host,
        )
        try:
            self._instance = linker.instantiate(self._store, module)
        except (wasmtime.WasmtimeError, wasmtime.Trap) as exc:
            raise AllocationFailed(f"cannot instantiate within {max_memory} bytes: {exc}") from None
        self._exports = self._instance.exports(self._store)
        self.exports = frozenset(e.name for e in module.exports)
        self._memory: wasmtime.Memory = self._exports["memory"]

    # -- introspection --------------------------------------------------

    @property
    def memory_size(self) -> int:
        return self._memory.data_len(self._store)

    @property
    def live_regions(self) -> list[MemoryRegion]:
        return [MemoryRegion(o, self._live[o]) for o in self._live_offsets]

    def _base(self) -> int:
        return ctypes.addressof(self._memory.data_ptr(self._store).contents)

    def address_of(self, region: MemoryRegion) -> int:
        """Raw host address of ``region``; valid until the guest runs again."""
        self.check_bounds(region)
        return self._base() + region.offset

    def check_bounds(self, region: MemoryRegion) -> None:
        size = self.memory_size
        if region.offset >= size or region.end > size:
            raise BoundsViolation(
                f"region [{region.offset}, {region.end}) outside memory of {size} bytes "
                f"in {self.name}"
            )

    # -- host import ----------------------------------------------------

    def _send_to_host(self, offset: int, length: int) -> None:
        offset &= U32_MAX
        length &= U32_MAX
        region = MemoryRegion(offset, length)
        try:
            self.check_bounds(region)
        except BoundsViolation as exc:
            raise _GuestReject(exc.detail) from None
        self._captures.append(HostCallCapture(region, self.instance_id, next(self._seq)))

    def take_captures(self) -> list[HostCallCapture]:
        out, self._captures = self._captures, []
        return out

    # -- guest allocator ------------------------------------------------

    def guest_alloc(self, length: int) -> MemoryRegion:
        if not 0 < length <= U32_MAX:
            raise AllocationFailed(f"cannot allocate {length} bytes")
        offset = self.invoke("allocate_memory", length)[0] & U32_MAX
        if offset == 0:
            raise AllocationFailed(f"guest allocator refused {length} bytes in {self.name}")
        region = MemoryRegion(offset, length)
        try:
            self.check_bounds(region)
        except BoundsViolation:
            raise AllocationFailed(f"guest returned out-of-bounds block at {offset}") from None
        if self._find_live(region, overlap=True) is not None:
            raise AllocationFailed(f"guest returned overlapping block at {offset}")
        bisect.insort(self._live_offsets, offset)
        self._live[offset] = length
        return region

    def guest_dealloc(self, region: MemoryRegion) -> None:
        self.check_bounds(region)
        if self._live.get(region.offset) != region.length:
            raise BoundsViolation(f"region at {region.offset} is not a live allocation")
        del self._live[region.offset]
        self._live_offsets.remove(region.offset)
        self.invoke("deallocate_memory", region.offset)

    def _find_live(self, region: MemoryRegion, overlap: bool = False) -> MemoryRegion | None:
        i = bisect.bisect_right(self._live_offsets, region.offset) - 1
        candidates = self._live_offsets[max(i, 0): i + 2] if overlap else self._live_offsets[max(i, 0): i + 1]
        for off in candidates:
            live = MemoryRegion(off, self._live[off])
            if overlap and live.overlaps(region):
                return live
            if not overlap and live.offset <= region.offset and region.end <= live.end:
                return live
        return None

    # -- memory access --------------------------------------------------

    def memory_view(self, region: MemoryRegion) -> memoryview:
        """Zero-copy view of guest memory; do not hold across guest calls."""
        addr = self.address_of(region)
        return memoryview((ctypes.c_ubyte * region.length).from_address(addr)).cast("B")

    def read_memory_host(self, region: MemoryRegion) -> bytes:
        return bytes(self.memory_view(region)) if region.length else b""

    def write_memory_host(self, data, offset: int) -> None:
        data = memoryview(data).cast("B")
        region = MemoryRegion(offset, data.nbytes)
        self.check_bounds(region)
        if self._find_live(region) is None:
            raise BoundsViolation(f"write to [{offset}, {region.end}) outside registered regions")
        if data.nbytes:
            self.memory_view(region)[:] = data

    read_output = read_memory_host
    write_output = write_memory_host

    def write_mailbox(self, region: MemoryRegion) -> None:
        """Tell the guest where delivered data landed."""
        words = region.offset.to_bytes(4, "little") + (region.length & U32_MAX).to_bytes(4, "little")
        ctypes.memmove(self._base() + guest_abi.MAILBOX_OFFSET, words, 8)

    # -- calls ----------------------------------------------------------

    def invoke(self, export_name: str, *args: int) -> list[int]:
        func = self._exports.get(export_name) if export_name in self.exports else None
        if not isinstance(func, wasmtime.Func):
            raise GuestAbiMissing(f"{self.name} has no exported function {export_name!r}")
        arity = len(func.type(self._store).params)
        if arity != len(args):
            raise GuestAbiMissing(f"{export_name} takes {arity} arguments, got {len(args)}")
        try:
            result = func(self._store, *args)
        except _GuestReject as exc:
            raise BoundsViolation(f"send_to_host rejected: {exc}") from None
        except wasmtime.Trap as exc:
            raise GuestAbiMissing(f"guest {self.name} trapped in {export_name}: {exc.message}") from None
        except wasmtime.WasmtimeError as exc:
            raise GuestAbiMissing(f"guest {self.name} failed in {export_name}: {exc}") from None
        if result is None:
            return []
        return list(result) if isinstance(result, (list, tuple)) else [result]

    def checksum(self, region: MemoryRegion) -> int:
        """Guest-computed FNV-1a over ``region``."""
        self.check_bounds(region)
        return self.invoke("checksum", region.offset, region.length & U32_MAX)[0] & ((1 << 64) - 1)


class WasmHost:
    """One Wasm VM: an engine plus the instances it hosts."""

    def __init__(self, engine: wasmtime.Engine | None = None):
        self.engine = engine or wasmtime.Engine()
        self._ids = itertools.count(1)
        self._instances: dict[int, InstanceHandle] = {}
        self._modules: dict[bytes, wasmtime.Module] = {}

    def compile(self, module_binary: bytes) -> wasmtime.Module:
        module_binary = bytes(module_binary)
        module = self._modules.get(module_binary)
        if module is None:
            try:
                module = wasmtime.Module(self.engine, module_binary)
            except wasmtime.WasmtimeError as exc:
                raise GuestAbiMissing(f"invalid wasm module: {exc}") from None
            self._modules[module_binary] = module
        return module

    def instantiate(self, module_binary: bytes | str | Path, max_memory: int = DEFAULT_MAX_MEMORY,
                    *, workflow_id: bytes | None = None, name: str | None = None) -> InstanceHandle:
        if isinstance(module_binary, (str, Path)):
            module_binary = Path(module_binary).read_bytes()
        module = self.compile(module_binary)
        report = guest_abi.inspect_module(module)
        if not report.ok:
            raise GuestAbiMissing("; ".join(report.problems()))
        handle = InstanceHandle(self, next(self._ids), module, max_memory, workflow_id, name)
        self._instances[handle.instance_id] = handle
        return handle

    def get(self, instance_id: int) -> InstanceHandle:
        return self._instances[instance_id]

    def instances(self) -> list[InstanceHandle]:
        return list(self._instances.values())

    def discard(self, handle: InstanceHandle) -> None:
        self._instances.pop(handle.instance_id, None)


def guest_alloc(instance: InstanceHandle, length: int) -> MemoryRegion:
    return instance.guest_alloc(length)


def guest_dealloc(instance: InstanceHandle, region: MemoryRegion) -> None:
    instance.guest_dealloc(region)


def read_memory_host(instance: InstanceHandle, region: MemoryRegion) -> bytes:
    return instance.read_memory_host(region)


def write_memory_host(instance: InstanceHandle, data, offset: int) -> None:
    instance.write_memory_host(data, offset)


def invoke(instance: InstanceHandle, export_name: str, args=()) -> list[int]:
    return instance.invoke(export_name, *args)


def take_captures(instance: InstanceHandle) -> list[HostCallCapture]:
    return instance.take_captures()


__all__ = [
    "DEFAULT_MAX_MEMORY", "PAGE_SIZE", "HostCallCapture", "InstanceHandle", "TransferError",
    "WasmHost", "guest_alloc", "guest_dealloc", "invoke", "read_memory_host", "take_captures",
    "write_memory_host",
]
