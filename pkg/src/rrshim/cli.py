"""Command-line entry points: ``shim`` (operator) and ``bench`` (experiments).

Exit codes shared by both: 0 success, 1 configuration error, 2 transport
error, 3 guest ABI error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from . import bench, guest_abi
from .config import ConfigError, load_config, parse_workflow
from .core import checksum64
from .errors import ErrorKind, TransferError
from .reports import emit_report, summarize
from .shim import Mode, Shim, run_shim

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRANSPORT = 2
EXIT_ABI = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _exit_code(err: TransferError) -> int:
    return EXIT_ABI if err.kind is ErrorKind.GuestAbiMissing else EXIT_TRANSPORT


# -- shim -------------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    return run_shim(cfg)


def _cmd_send(args) -> int:
    cfg = load_config(args.config)
    workflow = parse_workflow(args.workflow, "--workflow") if args.workflow else None
    mode = None if args.mode == "auto" else Mode(args.mode)
    # Listeners are needed when an override forces a socket plane between
    # two functions this shim hosts itself.
    with Shim(cfg).start(listeners=mode is not None) as shim:
        source = shim.instance(args.source, workflow)
        if "produce" not in source.exports:
            raise TransferError.of(ErrorKind.GuestAbiMissing,
                                   f"source function {args.source} does not export 'produce'")
        with source.lock:
            source.take_captures()
            if source.invoke("produce", args.seed, args.bytes)[0] == 0:
                raise TransferError.of(ErrorKind.AllocationFailed,
                                       f"source could not allocate {args.bytes} bytes")
            (capture,) = source.take_captures()
            checksum = checksum64(source.memory_view(capture.region))
        report = shim.dispatch(args.source, args.target, capture, workflow_id=workflow, mode=mode)
    print(f"sent mode={report.mode} bytes={report.payload_bytes} checksum={checksum:016x} "
          f"t_total={report.t_total:.6f}")
    return EXIT_OK


def _cmd_check_abi(args) -> int:
    try:
        guest_abi.check_abi(Path(args.wasm))  # raises GuestAbiMissing
    except OSError as exc:
        return _fail(f"cannot read {args.wasm}: {exc.strerror}", EXIT_CONFIG)
    print(f"ok {args.wasm}")
    return EXIT_OK


def shim_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shim", description="Inter-function data transfer sidecar.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="serve configured functions until SIGTERM")
    run.add_argument("--config", required=True, type=Path)
    run.set_defaults(func=_cmd_run)

    send = sub.add_parser("send", help="generate a payload in SOURCE and deliver it to TARGET")
    send.add_argument("--config", required=True, type=Path)
    send.add_argument("--workflow", help="32 hex digits; required when ids repeat across workflows")
    send.add_argument("--source", required=True, type=int)
    send.add_argument("--target", required=True, type=int)
    send.add_argument("--bytes", required=True, type=bench.parse_size)
    send.add_argument("--seed", type=int, default=7)
    send.add_argument("--mode", choices=["auto", "user", "kernel", "network"], default="auto")
    send.set_defaults(func=_cmd_send)

    chk = sub.add_parser("check-abi", help="verify a guest module's imports and exports")
    chk.add_argument("wasm")
    chk.set_defaults(func=_cmd_check_abi)
    return p


def _dispatch(parser: argparse.ArgumentParser, argv) -> int:
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except TransferError as err:
        return _fail(str(err), _exit_code(err))
    except bench.IntegrityError as exc:
        return _fail(str(exc), EXIT_TRANSPORT)
    except OSError as exc:
        return _fail(str(exc), EXIT_TRANSPORT)


def shim_main(argv=None) -> int:
    return _dispatch(shim_parser(), argv)


# -- bench ------------------------------------------------------------------


def _csv_list(text: str, kind=str) -> tuple:
    return tuple(kind(x.strip()) for x in text.split(",") if x.strip())


def load_sweep(path: Path) -> bench.SweepSpec:
    """Read a ``[sweep]`` section: modes, sizes, trials, warmup, seed, fanout."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        if not parser.read(path):
            raise ConfigError(f"cannot read sweep config {path}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed sweep config: {exc}") from None
    if not parser.has_section("sweep"):
        raise ConfigError(f"{path}: missing [sweep] section")
    sec = parser["sweep"]
    known = {"modes", "sizes", "trials", "warmup", "seed", "fanout"}
    for key in sec:
        if key not in known:
            raise ConfigError(f"sweep: unknown key '{key}'")
    kwargs = {}
    try:
        if "modes" in sec:
            kwargs["modes"] = _csv_list(sec["modes"])
        if "sizes" in sec:
            kwargs["sizes"] = _csv_list(sec["sizes"], bench.parse_size)
        for key in ("trials", "warmup", "seed"):
            if key in sec:
                kwargs[key] = int(sec[key])
        if "fanout" in sec:
            kwargs["fanout"] = _csv_list(sec["fanout"], int)
        return bench.SweepSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None


def _print_summary(reports) -> None:
    for row in summarize(reports):
        print(f"{row['mode']:>18} {row['payload_bytes']:>11} B  "
              f"t_total mean={row['mean_t_total'] * 1e3:10.3f} ms  sd={row['std_t_total'] * 1e3:8.3f} ms")


def _cmd_sweep(args) -> int:
    spec = load_sweep(args.config) if args.config else bench.SweepSpec()
    if args.large and bench.LARGE_SIZE not in spec.sizes:
        spec = bench.SweepSpec(spec.modes, spec.sizes + (bench.LARGE_SIZE,), spec.trials,
                               spec.fanout, spec.seed, spec.warmup)
    reports = bench.run_sequence(spec)
    data, summary = emit_report(reports, args.out)
    _print_summary(reports)
    print(f"wrote {data} and {summary}")
    return EXIT_OK


def _cmd_fanout(args) -> int:
    spec = bench.SweepSpec(modes=tuple(args.modes), sizes=(args.size,), trials=args.trials,
                           fanout=tuple(args.degree), seed=args.seed, warmup=args.warmup)
    results = bench.run_fanout(spec)
    by_key: dict[tuple[str, int], list] = {}
    for res in results:
        by_key.setdefault((res.mode, res.degree), []).append(res)
    for (mode, degree), group in by_key.items():
        lat = sum(r.mean_latency for r in group) / len(group)
        rps = sum(r.throughput_rps for r in group) / len(group)
        print(f"{mode:>18} degree={degree:<4} per-transfer={lat * 1e3:10.3f} ms  throughput={rps:10.1f} rps")
    if args.out:
        data, summary = emit_report([r for res in results for r in res.reports], args.out)
        print(f"wrote {data} and {summary}")
    return EXIT_OK


def bench_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Payload sweeps and fanout over every plane.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="sequence trials over modes x sizes")
    sweep.add_argument("--config", type=Path, help="INI file with a [sweep] section")
    sweep.add_argument("--out", required=True, type=Path)
    sweep.add_argument("--large", action="store_true", help="add the 500 MB point (needs ~1.3 GiB guest memory)")
    sweep.set_defaults(func=_cmd_sweep)

    fan = sub.add_parser("fanout", help="one source, k targets, same payload")
    fan.add_argument("--degree", type=int, action="append", required=True,
                     help="fanout degree; repeat for a degree sweep")
    fan.add_argument("--size", type=bench.parse_size, default=bench.MiB)
    fan.add_argument("--modes", type=lambda s: _csv_list(s), default=("user",))
    fan.add_argument("--trials", type=int, default=10)
    fan.add_argument("--warmup", type=int, default=2)
    fan.add_argument("--seed", type=int, default=7)
    fan.add_argument("--out", type=Path)
    fan.set_defaults(func=_cmd_fanout)
    return p


def bench_main(argv=None) -> int:
    try:
        return _dispatch(bench_parser(), argv)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in ("shim", "bench"):
        entry = shim_main if argv[0] == "shim" else bench_main
        return entry(argv[1:])
    print("usage: python -m rrshim {shim,bench} ...", file=sys.stderr)
    return EXIT_CONFIG
