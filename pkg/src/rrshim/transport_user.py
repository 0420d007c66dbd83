"""Same-VM transfer: source linear memory straight into target linear memory."""

from __future__ import annotations

import ctypes
import threading
from dataclasses import dataclass

from .core import MemoryRegion
from .delivery import Delivery, DeliverySink
from .errors import BoundsViolation, RegistryMiss
from .wasm_host import HostCallCapture, InstanceHandle


class CopyCounter:
    """Counts bulk payload copies; tests read it to pin copy minimality."""

    def __init__(self):
        self._lock = threading.Lock()
        self.copies = 0
        self.bytes = 0

    def record(self, nbytes: int) -> None:
        with self._lock:
            self.copies += 1
            self.bytes += nbytes

    def reset(self) -> None:
        with self._lock:
            self.copies = 0
            self.bytes = 0


copy_counter = CopyCounter()


@dataclass(frozen=True)
class LocalRoute:
    source: int
    target: int
    workflow_id: bytes

    def validate(self, source: InstanceHandle, target: InstanceHandle) -> None:
        if self.source == self.target or source.instance_id == target.instance_id:
            raise RegistryMiss("source and target must be distinct instances")
        if source.instance_id != self.source or target.instance_id != self.target:
            raise RegistryMiss("route does not name these instances")
        for inst in (source, target):
            if inst.workflow_id != self.workflow_id:
                raise RegistryMiss(f"{inst.name} is not registered under this workflow")


def _move(src: InstanceHandle, region: MemoryRegion, dst: InstanceHandle, landed: MemoryRegion) -> None:
    # the only payload-touching step on this plane
    ctypes.memmove(dst.address_of(landed), src.address_of(region), region.length)
    copy_counter.record(region.length)


def deliver_local(route: LocalRoute, capture: HostCallCapture, source: InstanceHandle,
                  sink: DeliverySink, *, release: bool = False) -> tuple[MemoryRegion, Delivery]:
    """Move the captured region into the sink's instance and run it there.

    Returns the region written in the target. With ``release=False`` the
    region stays allocated and the caller frees it.
    """
    target = sink.instance
    route.validate(source, target)
    if capture.instance_id != route.source:
        raise RegistryMiss("capture did not come from the route's source")
    region = capture.region
    if region.length == 0:
        raise BoundsViolation("empty region cannot be transferred")
    source.check_bounds(region)

    with target.lock:
        landed = sink.reserve(region.length)
        try:
            _move(source, region, target, landed)
        except BaseException:
            sink.abort(landed)
            raise
        delivery = sink.commit(landed, source_fn=route.source, release=release)
    return landed, delivery
