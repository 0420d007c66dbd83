"""Shim configuration: INI-style text with one ``[function <name>]`` block per function.

Example::

    [runtime]
    workflow = 000102030405060708090a0b0c0d0e0f
    hose = auto            ; auto | on | off
    timeout = 30
    chunk_size = 262144
    max_memory = 536870912

    [function producer]
    id = 1
    locality = same-vm     ; same-vm | same-host | remote
    wasm = guests/producer.wasm

    [function sink]
    id = 2
    locality = same-host
    endpoint = /run/rr/sink.sock   ; optional, derived from runtime_dir otherwise

    [function far]
    id = 3
    locality = remote
    address = 10.0.0.2:7400

A ``same-vm`` function may also carry ``serve_kernel = yes`` and/or
``serve_network = host:port``. The shim then accepts inbound transfers for
it on the corresponding plane. Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field
from pathlib import Path

from .framing import DEFAULT_CHUNK, DEFAULT_TIMEOUT
from .transport_kernel import default_runtime_dir, endpoint_path
from .transport_network import PeerAddress
from .wasm_host import DEFAULT_MAX_MEMORY

FUNCTION_PREFIX = "function "


class ConfigError(ValueError):
    pass


class Locality(enum.Enum):
    SameVm = "same-vm"
    SameHost = "same-host"
    Remote = "remote"


@dataclass(frozen=True)
class FunctionRecord:
    function_id: int
    name: str
    workflow_id: bytes
    locality: Locality
    wasm_path: Path | None = None
    endpoint: Path | None = None
    address: PeerAddress | None = None
    serve_kernel: bool = False
    serve_network: PeerAddress | None = None

    def __post_init__(self):
        if self.locality is Locality.SameHost and self.endpoint is None:
            raise ConfigError(f"function {self.name!r}: same-host locality requires an endpoint path")
        if self.locality is Locality.Remote and self.address is None:
            raise ConfigError(f"function {self.name!r}: remote locality requires 'address'")
        if self.locality is Locality.SameVm and self.wasm_path is None:
            raise ConfigError(f"function {self.name!r}: same-vm locality requires 'wasm'")


@dataclass
class ShimConfig:
    functions: list[FunctionRecord] = field(default_factory=list)
    runtime_dir: Path = field(default_factory=default_runtime_dir)
    hose: bool | None = None
    hose_capacity: int | None = None
    timeout: float = DEFAULT_TIMEOUT
    chunk_size: int = DEFAULT_CHUNK
    max_memory: int = DEFAULT_MAX_MEMORY
    source: Path | None = None

    @property
    def listeners(self) -> list[tuple[str, FunctionRecord]]:
        out = []
        for rec in self.functions:
            if rec.serve_kernel:
                out.append(("kernel", rec))
            if rec.serve_network is not None:
                out.append(("network", rec))
        return out

    def local_functions(self) -> list[FunctionRecord]:
        return [r for r in self.functions if r.locality is Locality.SameVm]


def parse_workflow(text: str, where: str) -> bytes:
    try:
        raw = bytes.fromhex(text.strip())
    except ValueError:
        raise ConfigError(f"{where}: workflow must be hex") from None
    if len(raw) != 16:
        raise ConfigError(f"{where}: workflow must be 16 bytes (32 hex digits)")
    return raw


def _bool(section: configparser.SectionProxy, key: str, where: str, default=False) -> bool:
    try:
        return section.getboolean(key, fallback=default)
    except ValueError:
        raise ConfigError(f"{where}: '{key}' must be yes/no") from None


def _number(section, key, where, kind, default):
    raw = section.get(key)
    if raw is None:
        return default
    try:
        value = kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: '{key}' must be a number, got {raw!r}") from None
    if value <= 0:
        raise ConfigError(f"{where}: '{key}' must be positive")
    return value


def _hose(value: str | None) -> bool | None:
    if value is None or value.strip().lower() == "auto":
        return None
    v = value.strip().lower()
    if v in ("on", "yes", "true", "1"):
        return True
    if v in ("off", "no", "false", "0"):
        return False
    raise ConfigError(f"runtime: 'hose' must be auto, on or off, got {value!r}")


def parse_config(text: str, base_dir: Path | None = None) -> ShimConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base_dir = Path(base_dir or ".")

    cfg = ShimConfig()
    default_wf = None
    if parser.has_section("runtime"):
        rt = parser["runtime"]
        known = {"runtime_dir", "workflow", "hose", "hose_capacity", "timeout", "chunk_size", "max_memory"}
        for key in rt:
            if key not in known:
                raise ConfigError(f"runtime: unknown key '{key}'")
        if "runtime_dir" in rt:
            cfg.runtime_dir = base_dir / rt["runtime_dir"]
        if "workflow" in rt:
            default_wf = parse_workflow(rt["workflow"], "runtime")
        cfg.hose = _hose(rt.get("hose"))
        cfg.hose_capacity = _number(rt, "hose_capacity", "runtime", int, None)
        cfg.timeout = _number(rt, "timeout", "runtime", float, DEFAULT_TIMEOUT)
        cfg.chunk_size = _number(rt, "chunk_size", "runtime", int, DEFAULT_CHUNK)
        cfg.max_memory = _number(rt, "max_memory", "runtime", int, DEFAULT_MAX_MEMORY)

    seen: dict[tuple[bytes, int], str] = {}
    for name in parser.sections():
        if name == "runtime":
            continue
        if not name.startswith(FUNCTION_PREFIX):
            raise ConfigError(f"unknown section [{name}]")
        fname = name[len(FUNCTION_PREFIX):].strip()
        where = f"function {fname!r}"
        sec = parser[name]
        known = {"id", "workflow", "locality", "wasm", "endpoint", "address", "serve_kernel", "serve_network"}
        for key in sec:
            if key not in known:
                raise ConfigError(f"{where}: unknown key '{key}'")

        if "id" not in sec:
            raise ConfigError(f"{where}: missing 'id'")
        try:
            fid = int(sec["id"])
        except ValueError:
            raise ConfigError(f"{where}: 'id' must be an integer") from None
        if not 0 < fid <= 0xFFFF_FFFF:
            raise ConfigError(f"{where}: 'id' must be a nonzero u32")

        if "workflow" in sec:
            wf = parse_workflow(sec["workflow"], where)
        elif default_wf is not None:
            wf = default_wf
        else:
            raise ConfigError(f"{where}: missing 'workflow' (and no runtime default)")
        if (wf, fid) in seen:
            raise ConfigError(f"{where}: id {fid} already used by {seen[(wf, fid)]!r} in this workflow")
        seen[(wf, fid)] = fname

        try:
            locality = Locality(sec.get("locality", "").strip())
        except ValueError:
            raise ConfigError(f"{where}: 'locality' must be same-vm, same-host or remote") from None

        wasm = base_dir / sec["wasm"] if "wasm" in sec else None
        endpoint = None
        address = None
        if locality is Locality.SameHost:
            endpoint = (base_dir / sec["endpoint"]) if "endpoint" in sec else endpoint_path(cfg.runtime_dir, wf, fid)
        if locality is Locality.Remote:
            if "address" not in sec:
                raise ConfigError(f"{where}: remote locality requires 'address'")
            try:
                address = PeerAddress.parse(sec["address"], fid)
            except ValueError as exc:
                raise ConfigError(f"{where}: 'address': {exc}") from None

        serve_kernel = _bool(sec, "serve_kernel", where)
        serve_network = None
        if "serve_network" in sec:
            try:
                serve_network = PeerAddress.parse(sec["serve_network"], fid)
            except ValueError as exc:
                raise ConfigError(f"{where}: 'serve_network': {exc}") from None
        if (serve_kernel or serve_network) and locality is not Locality.SameVm:
            raise ConfigError(f"{where}: only same-vm functions can be served by this shim")

        cfg.functions.append(FunctionRecord(
            function_id=fid, name=fname, workflow_id=wf, locality=locality, wasm_path=wasm,
            endpoint=endpoint, address=address, serve_kernel=serve_kernel, serve_network=serve_network,
        ))
    return cfg


def load_config(path: Path | str) -> ShimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, path.parent)
    cfg.source = path
    return cfg
