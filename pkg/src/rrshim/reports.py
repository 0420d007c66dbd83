"""Per-transfer measurement records and their CSV form."""

from __future__ import annotations

import csv
import dataclasses
import math
import resource
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CSV_COLUMNS = (
    "mode", "payload_bytes", "trial", "t_locate", "t_serialize", "t_transfer",
    "t_deserialize", "t_total", "throughput_rps", "cpu_user_s", "cpu_kernel_s", "rss_peak_bytes",
)
_NUMERIC = CSV_COLUMNS[3:]

CPU_NOTE = (
    "cpu_user_s/cpu_kernel_s are per-process CPU time deltas (getrusage), "
    "not cgroup counters; they include every thread of the measuring process"
)


def throughput_rps(requests: int, window_s: float) -> float:
    """Requests per second; sub-second windows are extrapolated to one second."""
    if window_s <= 0:
        return math.inf
    return requests / window_s


@dataclass(frozen=True)
class TransferReport:
    mode: str
    payload_bytes: int
    trial: int = 0
    t_locate: float = 0.0
    t_serialize: float = 0.0
    t_transfer: float = 0.0
    t_deserialize: float = 0.0
    t_total: float = 0.0
    throughput_rps: float = 0.0
    cpu_user_s: float = 0.0
    cpu_kernel_s: float = 0.0
    rss_peak_bytes: int = 0
    ok: bool = True
    error: str | None = field(default=None, compare=False)
    checksum: int | None = field(default=None, compare=False)

    def phase_sum(self) -> float:
        return self.t_locate + self.t_serialize + self.t_transfer + self.t_deserialize

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]

    def replace(self, **changes) -> "TransferReport":
        return dataclasses.replace(self, **changes)


class CpuMeter:
    """Process CPU time and peak RSS across a measured section."""

    def __enter__(self):
        self._start = resource.getrusage(resource.RUSAGE_SELF)
        return self

    def __exit__(self, *exc):
        end = resource.getrusage(resource.RUSAGE_SELF)
        self.user = end.ru_utime - self._start.ru_utime
        self.kernel = end.ru_stime - self._start.ru_stime
        self.rss_peak = end.ru_maxrss * 1024  # KiB on Linux
        return False


def summarize(reports: Iterable[TransferReport]) -> list[dict]:
    """Mean and sample standard deviation per (mode, payload_bytes)."""
    groups: dict[tuple[str, int], list[TransferReport]] = defaultdict(list)
    for r in reports:
        groups[(r.mode, r.payload_bytes)].append(r)
    rows = []
    for (mode, size), rs in groups.items():
        row = {"mode": mode, "payload_bytes": size, "trials": len(rs)}
        for col in _NUMERIC:
            values = [float(getattr(r, col)) for r in rs]
            row[f"mean_{col}"] = statistics.fmean(values)
            row[f"std_{col}"] = statistics.stdev(values) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


def summary_columns() -> list[str]:
    cols = ["mode", "payload_bytes", "trials"]
    for col in _NUMERIC:
        cols += [f"mean_{col}", f"std_{col}"]
    return cols


def summary_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.summary{path.suffix or '.csv'}")


def emit_report(reports: Sequence[TransferReport], path: Path | str) -> tuple[Path, Path]:
    """Write one row per trial plus a ``<stem>.summary.csv`` companion."""
    if not reports:
        raise ValueError("no reports to emit")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])

    spath = summary_path(path)
    with spath.open("w", newline="") as fh:
        fh.write(f"# {CPU_NOTE}\n")
        w = csv.DictWriter(fh, fieldnames=summary_columns())
        w.writeheader()
        for row in summarize(reports):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path, spath


def read_report(path: Path | str) -> list[TransferReport]:
    with Path(path).open(newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            kw = {k: float(v) for k, v in row.items() if k in _NUMERIC}
            kw["rss_peak_bytes"] = int(float(row["rss_peak_bytes"]))
            out.append(TransferReport(mode=row["mode"], payload_bytes=int(row["payload_bytes"]),
                                      trial=int(row["trial"]), **kw))
        return out
