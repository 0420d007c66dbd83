"""The sidecar: registry, plane selection, dispatch and process lifecycle."""

from __future__ import annotations

import enum
import logging
import signal
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .config import FunctionRecord, Locality, ShimConfig
from .core import FrameHeader, MsgType
from .delivery import Delivery, DeliverySink
from .errors import RegistryMiss, TransferError
from .framing import FrameChannel
from .reports import CpuMeter, TransferReport, throughput_rps
from .transport_kernel import KernelChannel, KernelServer, LocalEndpoint, endpoint_path
from .transport_network import NetworkChannel, NetworkServer, PeerAddress
from .transport_user import LocalRoute, deliver_local
from .wasm_host import HostCallCapture, InstanceHandle, WasmHost

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    User = "user"
    Kernel = "kernel"
    Network = "network"


_MODE_FOR = {Locality.SameVm: Mode.User, Locality.SameHost: Mode.Kernel, Locality.Remote: Mode.Network}


@dataclass(frozen=True)
class RouteDecision:
    mode: Mode
    target: FunctionRecord


class Registry:
    """Immutable after construction; safe to read from any thread."""

    def __init__(self, records: list[FunctionRecord]):
        self._by_key: dict[tuple[bytes, int], FunctionRecord] = {}
        for rec in records:
            key = (rec.workflow_id, rec.function_id)
            if key in self._by_key:
                raise ValueError(f"duplicate function id {rec.function_id} in workflow {rec.workflow_id.hex()}")
            self._by_key[key] = rec

    def __iter__(self):
        return iter(self._by_key.values())

    def __len__(self):
        return len(self._by_key)

    def lookup(self, function_id: int, workflow_id: bytes | None = None) -> FunctionRecord:
        if workflow_id is not None:
            rec = self._by_key.get((workflow_id, function_id))
            if rec is None:
                raise RegistryMiss(f"function {function_id} not registered in workflow {workflow_id.hex()}")
            return rec
        hits = [r for (wf, fid), r in self._by_key.items() if fid == function_id]
        if not hits:
            raise RegistryMiss(f"function {function_id} not registered")
        if len(hits) > 1:
            raise RegistryMiss(f"function {function_id} is ambiguous across workflows")
        return hits[0]

    def resolve_route(self, source_id: int, target_id: int, workflow_id: bytes | None = None) -> RouteDecision:
        source = self.lookup(source_id, workflow_id)
        try:
            target = self.lookup(target_id, source.workflow_id)
        except RegistryMiss:
            raise RegistryMiss(
                f"function {target_id} is not in the workflow of function {source_id}"
            ) from None
        if source.function_id == target.function_id:
            raise RegistryMiss("a function cannot send to itself")
        return RouteDecision(_MODE_FOR[target.locality], target)


def mode_label(mode: Mode, zero_copy: bool | None = None) -> str:
    if mode is Mode.Network and zero_copy is False:
        return "network-fallback"
    return mode.value


class Shim:
    """One sidecar: a Wasm VM with its local functions plus outbound channels."""

    def __init__(self, config: ShimConfig, host: WasmHost | None = None,
                 on_delivery: Callable[[FunctionRecord, Delivery], None] | None = None):
        self.config = config
        self.registry = Registry(config.functions)
        self.host = host or WasmHost()
        self.instances: dict[tuple[bytes, int], InstanceHandle] = {}
        self.sinks: dict[tuple[bytes, int], DeliverySink] = {}
        self.servers: list = []
        self.reports: list[TransferReport] = []
        self._channels: dict[tuple, FrameChannel] = {}
        self._channels_lock = threading.Lock()
        self._on_delivery = on_delivery
        self._started = False

    # -- lifecycle ------------------------------------------------------

    def start(self, listeners: bool = True) -> "Shim":
        try:
            for rec in self.config.local_functions():
                key = (rec.workflow_id, rec.function_id)
                inst = self.host.instantiate(rec.wasm_path, self.config.max_memory,
                                             workflow_id=rec.workflow_id, name=rec.name)
                self.instances[key] = inst
                self.sinks[key] = self._make_sink(rec, inst)
            if listeners:
                for plane, rec in self.config.listeners:
                    self.servers.append(self._listen(plane, rec))
        except BaseException:
            self.close()
            raise
        self._started = True
        return self

    def _make_sink(self, rec: FunctionRecord, inst: InstanceHandle) -> DeliverySink:
        cb = self._on_delivery
        return DeliverySink(inst, rec.function_id,
                            on_commit=None if cb is None else (lambda d, _rec=rec: cb(_rec, d)))

    def _listen(self, plane: str, rec: FunctionRecord):
        sink = self.sinks[(rec.workflow_id, rec.function_id)]
        cfg = self.config
        if plane == "kernel":
            ep = LocalEndpoint.for_function(cfg.runtime_dir, rec.workflow_id, rec.function_id)
            server = KernelServer(ep, sink, workflow_id=rec.workflow_id, timeout=cfg.timeout,
                                  chunk_size=cfg.chunk_size)
        else:
            addr = rec.serve_network
            try:
                server = NetworkServer((addr.host, addr.port), sink, workflow_id=rec.workflow_id,
                                       hose=cfg.hose, hose_capacity=cfg.hose_capacity,
                                       timeout=cfg.timeout, chunk_size=cfg.chunk_size)
            except OSError as exc:
                raise OSError(exc.errno, f"cannot listen on port {addr.port} ({addr}): {exc.strerror}") from None
        return server.start()

    def close(self) -> None:
        for server in self.servers:
            server.close()
        self.servers.clear()
        with self._channels_lock:
            for chan in self._channels.values():
                chan.close()
            self._channels.clear()
        for inst in self.instances.values():
            self.host.discard(inst)

    def __enter__(self):
        return self if self._started else self.start()

    def __exit__(self, *exc):
        self.close()

    # -- lookups --------------------------------------------------------

    def instance(self, function_id: int, workflow_id: bytes | None = None) -> InstanceHandle:
        rec = self.registry.lookup(function_id, workflow_id)
        try:
            return self.instances[(rec.workflow_id, rec.function_id)]
        except KeyError:
            raise RegistryMiss(f"function {rec.name!r} is not hosted by this shim") from None

    def sink(self, function_id: int, workflow_id: bytes | None = None) -> DeliverySink:
        rec = self.registry.lookup(function_id, workflow_id)
        try:
            return self.sinks[(rec.workflow_id, rec.function_id)]
        except KeyError:
            raise RegistryMiss(f"function {rec.name!r} is not hosted by this shim") from None

    def resolve_route(self, source_id: int, target_id: int, workflow_id: bytes | None = None,
                      mode: Mode | None = None) -> RouteDecision:
        decision = self.registry.resolve_route(source_id, target_id, workflow_id)
        if mode is None or mode is decision.mode:
            return decision
        return RouteDecision(mode, decision.target)

    def _kernel_endpoint(self, target: FunctionRecord) -> LocalEndpoint:
        if target.locality is Locality.SameHost:
            return LocalEndpoint(target.endpoint, target.function_id)
        if target.locality is Locality.SameVm:
            return LocalEndpoint(endpoint_path(self.config.runtime_dir, target.workflow_id, target.function_id),
                                 target.function_id)
        raise RegistryMiss(f"function {target.name!r} has no kernel endpoint")

    def _network_peer(self, target: FunctionRecord) -> PeerAddress:
        if target.locality is Locality.Remote:
            return target.address
        if target.serve_network is not None:
            return target.serve_network
        raise RegistryMiss(f"function {target.name!r} has no network address")

    def channel(self, mode: Mode, target: FunctionRecord, zero_copy: bool | None = None) -> FrameChannel:
        cfg = self.config
        if mode is Mode.Kernel:
            ep = self._kernel_endpoint(target)
            key = ("kernel", str(ep.path))
            factory = lambda: KernelChannel(ep, cfg.timeout)  # noqa: E731
        else:
            peer = self._network_peer(target)
            hose = cfg.hose if zero_copy is None else zero_copy
            key = ("network", peer.host, peer.port, hose)
            factory = lambda: NetworkChannel(peer, hose=hose, hose_capacity=cfg.hose_capacity,  # noqa: E731
                                             timeout=cfg.timeout, chunk_size=cfg.chunk_size)
        with self._channels_lock:
            chan = self._channels.get(key)
            if chan is None:
                chan = self._channels[key] = factory()
            return chan

    # -- dispatch -------------------------------------------------------

    def dispatch(self, source_id: int, target_id: int, capture: HostCallCapture, *,
                 workflow_id: bytes | None = None, mode: Mode | None = None,
                 zero_copy: bool | None = None) -> TransferReport:
        """Move one captured region to ``target_id`` on exactly one plane."""
        label = mode.value if mode else "unresolved"
        size = capture.region.length
        meter = CpuMeter()
        t0 = time.perf_counter()
        checksum = None
        try:
            with meter:
                decision = self.resolve_route(source_id, target_id, workflow_id, mode)
                label = decision.mode.value
                if decision.mode is Mode.Network:
                    label = mode_label(Mode.Network, self.channel(Mode.Network, decision.target, zero_copy).zero_copy)
                source = self.instance(source_id, decision.target.workflow_id)
                if capture.instance_id != source.instance_id:
                    raise RegistryMiss("capture was not produced by the source function")
                source.check_bounds(capture.region)
                t1 = time.perf_counter()
                checksum = self._transfer(decision, source, capture, zero_copy)
                t2 = time.perf_counter()
        except TransferError as err:
            t_end = time.perf_counter()
            self.reports.append(TransferReport(
                mode=label, payload_bytes=size, t_total=t_end - t0, ok=False, error=str(err),
                cpu_user_s=getattr(meter, "user", 0.0), cpu_kernel_s=getattr(meter, "kernel", 0.0),
                rss_peak_bytes=getattr(meter, "rss_peak", 0)))
            raise err.with_mode(label)
        total = t2 - t0
        report = TransferReport(
            mode=label, payload_bytes=size, t_locate=t1 - t0, t_transfer=t2 - t1, t_total=total,
            throughput_rps=throughput_rps(1, total), cpu_user_s=meter.user, cpu_kernel_s=meter.kernel,
            rss_peak_bytes=meter.rss_peak, checksum=checksum)
        self.reports.append(report)
        return report

    def _transfer(self, decision: RouteDecision, source: InstanceHandle, capture: HostCallCapture,
                  zero_copy: bool | None) -> int | None:
        target = decision.target
        if decision.mode is Mode.User:
            sink = self.sink(target.function_id, target.workflow_id)
            route = LocalRoute(source.instance_id, sink.instance.instance_id, target.workflow_id)
            _, delivery = deliver_local(route, capture, source, sink, release=True)
            return delivery.checksum
        header = FrameHeader(
            MsgType.DATA, workflow_id=target.workflow_id,
            source_fn=self._function_id_of(source), target_fn=target.function_id,
            payload_len=capture.region.length,
        )
        chan = self.channel(decision.mode, target, zero_copy)
        chan.send(header, source, capture.region)
        return None

    def _function_id_of(self, inst: InstanceHandle) -> int:
        for (wf, fid), i in self.instances.items():
            if i is inst:
                return fid
        return 0

    def fanout(self, source_id: int, target_ids: list[int], capture: HostCallCapture, **kwargs) -> list[TransferReport]:
        """Same capture to every target; one report per target."""
        return [self.dispatch(source_id, t, capture, **kwargs) for t in target_ids]


def _say(line: str) -> None:
    print(line, flush=True)


def run_shim(config: ShimConfig, stop: threading.Event | None = None,
             announce: Callable[[str], None] = _say) -> int:
    """Serve until SIGTERM/SIGINT (or ``stop``); returns the process exit code."""
    stop = stop or threading.Event()

    def on_delivery(rec: FunctionRecord, d: Delivery):
        cs = f"{d.checksum:016x}" if d.checksum is not None else "-"
        announce(f"delivered function={rec.function_id} source={d.source_fn} bytes={d.length} checksum={cs}")

    shim = Shim(config, on_delivery=on_delivery)
    try:
        shim.start()
    except OSError as exc:
        announce(f"error: {exc.strerror or exc}")
        return 2
    except TransferError as err:
        announce(f"error: {err}")
        return 3 if err.kind.value == "GuestAbiMissing" else 2

    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            previous[sig] = signal.signal(sig, lambda *_: stop.set())
    try:
        for server in shim.servers:
            where = getattr(server, "endpoint", None)
            where = where.path if where is not None else "%s:%d" % server.address
            announce(f"listening {type(server).__name__} function={server.sink.function_id} at {where}")
        announce("ready")
        while not stop.wait(0.2):
            pass
    finally:
        shim.close()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    announce("stopped")
    return 0
