"""Receive side shared by every plane: landing bytes in a target guest."""

from __future__ import annotations

import collections
import itertools
import threading
from dataclasses import dataclass
from typing import Callable

from .core import MemoryRegion
from .wasm_host import InstanceHandle

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Delivery:
    sequence_no: int
    source_fn: int
    length: int
    checksum: int | None


class DeliverySink:
    """A target instance plus the bookkeeping for bytes delivered into it.

    The receive path is ``reserve`` -> fill the region -> ``commit``. Callers
    hold ``instance.lock`` across the whole sequence so deliveries into one
    instance never interleave. ``abort`` releases a region whose payload
    never fully arrived; ``run`` is then never invoked.
    """

    def __init__(self, instance: InstanceHandle, function_id: int = 0, history: int = 1024,
                 on_commit: Callable[[Delivery], None] | None = None):
        self.instance = instance
        self.on_commit = on_commit
        self.function_id = function_id
        self.deliveries: collections.deque[Delivery] = collections.deque(maxlen=history)
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._count = 0
        self._has_checksum = "last_checksum" in instance.exports

    @property
    def lock(self):
        return self.instance.lock

    @property
    def count(self) -> int:
        return self._count

    def reserve(self, length: int) -> MemoryRegion:
        return self.instance.guest_alloc(length)

    def abort(self, region: MemoryRegion) -> None:
        self.instance.guest_dealloc(region)

    def commit(self, region: MemoryRegion, source_fn: int = 0, release: bool = True) -> Delivery:
        """Point the mailbox at ``region``, run the guest, then free the region."""
        inst = self.instance
        try:
            inst.write_mailbox(region)
            inst.invoke("run")
            checksum = inst.invoke("last_checksum")[0] & _MASK64 if self._has_checksum else None
        finally:
            if release:
                inst.guest_dealloc(region)
        delivery = Delivery(next(self._seq), source_fn, region.length, checksum)
        with self._cond:
            self.deliveries.append(delivery)
            self._count += 1
            self._cond.notify_all()
        if self.on_commit is not None:
            self.on_commit(delivery)
        return delivery

    def last(self) -> Delivery | None:
        with self._cond:
            return self.deliveries[-1] if self.deliveries else None

    def wait_for(self, count: int, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._count >= count, timeout)
