"""Desk-scale experiment driver: payload sweeps and fanout over every plane.

Everything runs in one process. A source shim hosts the producer and the
user-mode consumers. Separate sink shims serve the kernel plane, the
network plane with the hose, and the network plane without it. A
serialized receiver stands in for the baseline. Every trial's delivered
checksum is compared with the host-side generator oracle before its
timings are kept.
"""

from __future__ import annotations

import functools
import logging
import re
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import guest_abi
from .baseline import BaselineClient, BaselineServer, baseline_transfer
from .config import FunctionRecord, Locality, ShimConfig
from .core import checksum64
from .delivery import DeliverySink
from .errors import TransferError
from .reports import CpuMeter, TransferReport, throughput_rps
from .shim import Mode, Shim
from .transport_kernel import endpoint_path
from .transport_network import PeerAddress
from .wasm_host import DEFAULT_MAX_MEMORY, HostCallCapture

log = logging.getLogger(__name__)

ALL_MODES = ("user", "kernel", "network", "network-fallback", "baseline")
KiB = 1024
MiB = 1024 * KiB
DEFAULT_SIZES = (KiB, 64 * KiB, MiB, 10 * MiB, 100 * MiB)
LARGE_SIZE = 500 * 1000 * 1000
LARGE_MAX_MEMORY = 1280 * MiB

WORKFLOW = bytes.fromhex("52524e52000000000000000000000001")
PRODUCER_ID = 1
_FIRST_TARGET = {"user": 1000, "kernel": 2000, "network": 3000, "network-fallback": 4000}


class IntegrityError(AssertionError):
    def __init__(self, mode: str, size: int, trial: int, expected: int, got: int | None):
        got_s = "none" if got is None else f"{got:016x}"
        super().__init__(f"checksum mismatch: mode={mode} size={size} trial={trial} "
                         f"expected={expected:016x} got={got_s}")
        self.mode, self.size, self.trial = mode, size, trial


_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]i?B|B)?\s*$", re.IGNORECASE)
_UNITS = {"b": 1, "kb": 1000, "mb": 1000**2, "gb": 1000**3, "kib": KiB, "mib": MiB, "gib": 1024 * MiB}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text)
    if not m:
        raise ValueError(f"bad size {text!r}")
    unit = (m.group(2) or "B").lower()
    return int(float(m.group(1)) * _UNITS[unit])


@dataclass
class SweepSpec:
    modes: tuple[str, ...] = ALL_MODES
    sizes: tuple[int, ...] = DEFAULT_SIZES
    trials: int = 10
    fanout: tuple[int, ...] = (1,)
    seed: int = 7
    warmup: int = 2

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.sizes = tuple(self.sizes)
        self.fanout = tuple(self.fanout)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if list(self.sizes) != sorted(self.sizes) or not self.sizes or self.sizes[0] <= 0:
            raise ValueError("sizes must be positive and sorted ascending")
        unknown = set(self.modes) - set(ALL_MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")
        if any(k < 1 for k in self.fanout):
            raise ValueError("fanout degrees must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@functools.lru_cache(maxsize=32)
def expected_checksum(seed: int, size: int) -> int:
    return checksum64(guest_abi.generate_payload(seed, size))


@dataclass
class FanoutResult:
    mode: str
    payload_bytes: int
    degree: int
    trial: int
    wall_s: float
    reports: list[TransferReport] = field(default_factory=list)

    @property
    def mean_latency(self) -> float:
        return statistics.fmean(r.t_total for r in self.reports)

    @property
    def throughput_rps(self) -> float:
        return throughput_rps(self.degree, self.wall_s)


class Testbed:
    """Source shim, sink shims and baseline receiver wired together on loopback."""

    __test__ = False  # not a pytest class despite the name

    def __init__(self, fanout: int = 1, modes=ALL_MODES, max_memory: int = DEFAULT_MAX_MEMORY,
                 hose_capacity: int | None = None, runtime_dir: Path | None = None):
        self.fanout = fanout
        self.modes = tuple(modes)
        self._tmp = None
        if runtime_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="rrbench-")
            runtime_dir = Path(self._tmp.name)
        self.runtime_dir = Path(runtime_dir)
        self.max_memory = max_memory
        self.hose_capacity = hose_capacity
        self.sink_shims: dict[str, Shim] = {}
        self.baseline_server: BaselineServer | None = None
        self.baseline_client: BaselineClient | None = None
        self._baseline_sink: DeliverySink | None = None
        self.source: Shim | None = None
        try:
            self._build()
        except BaseException:
            self.close()
            raise

    def _cfg(self, functions, hose=None) -> ShimConfig:
        return ShimConfig(functions=functions, runtime_dir=self.runtime_dir, hose=hose,
                          hose_capacity=self.hose_capacity, max_memory=self.max_memory)

    def _rec(self, fid, name, locality, **kw) -> FunctionRecord:
        return FunctionRecord(function_id=fid, name=name, workflow_id=WORKFLOW, locality=locality, **kw)

    def _build(self):
        consumer = guest_abi.guest_path("consumer")
        k = self.fanout
        source_funcs = [self._rec(PRODUCER_ID, "producer", Locality.SameVm,
                                  wasm_path=guest_abi.guest_path("producer"))]

        if "user" in self.modes:
            for i in range(k):
                fid = _FIRST_TARGET["user"] + i
                source_funcs.append(self._rec(fid, f"user-{i}", Locality.SameVm, wasm_path=consumer))

        if "kernel" in self.modes:
            funcs = [self._rec(_FIRST_TARGET["kernel"] + i, f"kernel-{i}", Locality.SameVm,
                               wasm_path=consumer, serve_kernel=True) for i in range(k)]
            self.sink_shims["kernel"] = Shim(self._cfg(funcs)).start()
            for rec in funcs:
                source_funcs.append(self._rec(
                    rec.function_id, rec.name, Locality.SameHost,
                    endpoint=endpoint_path(self.runtime_dir, WORKFLOW, rec.function_id)))

        for mode, hose in (("network", None), ("network-fallback", False)):
            if mode not in self.modes:
                continue
            funcs = [self._rec(_FIRST_TARGET[mode] + i, f"{mode}-{i}", Locality.SameVm, wasm_path=consumer,
                               serve_network=PeerAddress("127.0.0.1", 0)) for i in range(k)]
            shim = Shim(self._cfg(funcs, hose=hose)).start()
            self.sink_shims[mode] = shim
            for server in shim.servers:
                host, port = server.address
                fid = server.sink.function_id
                source_funcs.append(self._rec(fid, f"{mode}-{fid}", Locality.Remote,
                                              address=PeerAddress(host, port, fid)))

        self.source = Shim(self._cfg(source_funcs)).start(listeners=False)

        if "baseline" in self.modes:
            inst = self.source.host.instantiate(consumer, self.max_memory, workflow_id=WORKFLOW, name="baseline")
            self._baseline_sink = DeliverySink(inst, 0)
            self.baseline_server = BaselineServer(("127.0.0.1", 0), self._baseline_sink).start()
            self.baseline_client = BaselineClient(self.baseline_server.address)

    # -- plumbing -------------------------------------------------------

    @property
    def producer(self):
        return self.source.instance(PRODUCER_ID, WORKFLOW)

    def produce(self, seed: int, size: int) -> HostCallCapture:
        p = self.producer
        with p.lock:
            p.take_captures()
            if p.invoke("produce", seed, size)[0] == 0:
                raise MemoryError(f"producer could not allocate {size} bytes")
            (capture,) = p.take_captures()
        return capture

    def release(self, capture: HostCallCapture) -> None:
        p = self.producer
        with p.lock:
            p.invoke("discard")

    def targets(self, mode: str, degree: int = 1) -> list[int]:
        if mode == "baseline":
            return [0] * degree
        return [_FIRST_TARGET[mode] + i for i in range(degree)]

    def sink(self, mode: str, target: int) -> DeliverySink:
        if mode == "baseline":
            return self._baseline_sink
        if mode == "user":
            return self.source.sink(target, WORKFLOW)
        return self.sink_shims[mode].sink(target, WORKFLOW)

    def transfer(self, mode: str, target: int, capture: HostCallCapture) -> TransferReport:
        if mode == "baseline":
            with CpuMeter() as meter:
                t = baseline_transfer(self.baseline_client, self.baseline_server, self.producer,
                                      capture.region, PRODUCER_ID, target)
            return TransferReport(
                mode="baseline", payload_bytes=capture.region.length, t_locate=t.t_locate,
                t_serialize=t.t_serialize, t_transfer=t.t_transfer, t_deserialize=t.t_deserialize,
                t_total=t.t_total, throughput_rps=throughput_rps(1, t.t_total),
                cpu_user_s=meter.user, cpu_kernel_s=meter.kernel, rss_peak_bytes=meter.rss_peak)
        kwargs = {}
        if mode == "network-fallback":
            kwargs["zero_copy"] = False
        return self.source.dispatch(PRODUCER_ID, target, capture, workflow_id=WORKFLOW, **kwargs)

    def verified_transfer(self, mode: str, target: int, capture: HostCallCapture, expected: int,
                          trial: int) -> TransferReport:
        sink = self.sink(mode, target)
        before = sink.count
        report = self.transfer(mode, target, capture)
        delivery = sink.last()
        got = delivery.checksum if delivery is not None and sink.count == before + 1 else None
        if got != expected:
            raise IntegrityError(mode, capture.region.length, trial, expected, got)
        return report.replace(checksum=got)

    def close(self):
        if self.baseline_client is not None:
            self.baseline_client.close()
        if self.baseline_server is not None:
            self.baseline_server.close()
        if self.source is not None:
            self.source.close()
        for shim in self.sink_shims.values():
            shim.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_source(testbed: Testbed, capture: HostCallCapture, expected: int, mode: str) -> None:
    p = testbed.producer
    with p.lock:
        got = checksum64(p.memory_view(capture.region))
    if got != expected:
        raise IntegrityError(mode, capture.region.length, -1, expected, got)


def run_sequence(spec: SweepSpec, testbed: Testbed | None = None) -> list[TransferReport]:
    """Producer -> consumer ``spec.trials`` times per (mode, size), after warmup."""
    own = testbed is None
    testbed = testbed or Testbed(modes=spec.modes, max_memory=_memory_for(spec))
    reports: list[TransferReport] = []
    try:
        for mode in spec.modes:
            (target,) = testbed.targets(mode, 1)
            for size in spec.sizes:
                expected = expected_checksum(spec.seed, size)
                capture = testbed.produce(spec.seed, size)
                try:
                    _check_source(testbed, capture, expected, mode)
                    for i in range(spec.warmup + spec.trials):
                        trial = i - spec.warmup
                        report = testbed.verified_transfer(mode, target, capture, expected, trial)
                        if trial >= 0:
                            reports.append(report.replace(trial=trial))
                finally:
                    testbed.release(capture)
                log.info("%s %d B: done", mode, size)
    finally:
        if own:
            testbed.close()
    return reports


def run_fanout(spec: SweepSpec, testbed_factory=None) -> list[FanoutResult]:
    """One source, ``k`` targets, the same payload to each, per degree in ``spec.fanout``.

    User-mode targets share the source's VM and are served one after the
    other; the other planes are dispatched from a thread pool of size ``k``.
    """
    results: list[FanoutResult] = []
    for degree in spec.fanout:
        factory = testbed_factory or (lambda k: Testbed(fanout=k, modes=spec.modes, max_memory=_memory_for(spec)))
        with factory(degree) as tb:
            for mode in spec.modes:
                targets = tb.targets(mode, degree)
                for size in spec.sizes:
                    expected = expected_checksum(spec.seed, size)
                    capture = tb.produce(spec.seed, size)
                    try:
                        for i in range(spec.warmup + spec.trials):
                            trial = i - spec.warmup
                            res = _fanout_round(tb, mode, targets, capture, expected, trial)
                            if trial >= 0:
                                results.append(res)
                    finally:
                        tb.release(capture)
    return results


def _fanout_round(tb: Testbed, mode: str, targets: list[int], capture, expected: int, trial: int) -> FanoutResult:
    label = f"{mode}/fanout{len(targets)}"
    t0 = time.perf_counter()
    if mode in ("user", "baseline") or len(targets) == 1:
        reports = [tb.verified_transfer(mode, t, capture, expected, trial) for t in targets]
    else:
        with ThreadPoolExecutor(max_workers=len(targets)) as pool:
            futures = [pool.submit(tb.verified_transfer, mode, t, capture, expected, trial) for t in targets]
            reports = [f.result() for f in futures]
    wall = time.perf_counter() - t0
    reports = [r.replace(mode=label, trial=trial) for r in reports]
    return FanoutResult(mode, capture.region.length, len(targets), trial, wall, reports)


def _memory_for(spec: SweepSpec) -> int:
    return LARGE_MAX_MEMORY if max(spec.sizes) > 200 * MiB else DEFAULT_MAX_MEMORY


__all__ = [
    "ALL_MODES", "DEFAULT_SIZES", "FanoutResult", "IntegrityError", "Mode", "SweepSpec", "Testbed",
    "TransferError", "expected_checksum", "parse_size", "run_fanout", "run_sequence",
]
