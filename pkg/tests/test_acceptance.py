"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL verdict line (shown in the ``acceptance``
section of the terminal summary) before asserting, so a failing criterion
still reports its measured numbers.
"""

import subprocess
import sys
from collections import defaultdict
from pathlib import Path

import pytest

from oracles import mean
from rrshim import bench, guest_abi
from rrshim.bench import SweepSpec, Testbed, run_fanout, run_sequence
from rrshim.errors import ErrorKind, TransferError
from support import guest_without_export, record_verdict

KiB, MiB = 1024, 1 << 20
SIZES = (1, KiB, 64 * KiB, MiB, 10 * MiB, 100 * MiB)
MODES = ("user", "kernel", "network", "network-fallback", "baseline")
TRIALS, WARMUP = 10, 2
TESTS = Path(__file__).parent

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def sweep():
    spec = SweepSpec(modes=MODES, sizes=SIZES, trials=TRIALS, warmup=WARMUP)
    with Testbed(modes=MODES) as tb:
        reports = run_sequence(spec, tb)
    groups = defaultdict(list)
    for r in reports:
        groups[(r.mode, r.payload_bytes)].append(r)
    return groups


def mean_total(groups, mode, size):
    return mean([r.t_total for r in groups[(mode, size)]])


def test_integrity(sweep):
    bad = [(m, n, sum(r.checksum != bench.expected_checksum(7, n) for r in reps))
           for (m, n), reps in sweep.items()]
    counts = {key: len(reps) for key, reps in sweep.items()}
    ok = (set(counts) == {(m, n) for m in MODES for n in SIZES}
          and all(c == TRIALS for c in counts.values()) and not any(b for *_, b in bad))
    record_verdict(1, "integrity", ok, f"{len(counts)} cells x {TRIALS} trials, "
                                      f"{sum(b for *_, b in bad)} checksum mismatches")
    assert ok


def test_serialization_freedom(sweep):
    structural = all(r.t_serialize == 0 and r.t_deserialize == 0
                     for (m, _), reps in sweep.items() if m != "baseline" for r in reps)
    reps = sweep[("baseline", 100 * MiB)]
    share = mean([(r.t_serialize + r.t_deserialize) / r.t_total for r in reps])
    ok = structural and share >= 0.10
    record_verdict(2, "serialization-freedom", ok,
                   f"shim planes zero={structural}, baseline share at 100 MiB={share:.1%} (need >= 10%)")
    assert ok


def test_relative_latency(sweep):
    parts, ok = [], True
    for mode, factor, floor in (("user", 0.6, MiB), ("kernel", 0.9, 10 * MiB)):
        for n in SIZES:
            if n < floor:
                continue
            ratio = mean_total(sweep, mode, n) / mean_total(sweep, "baseline", n)
            ok &= ratio <= factor
            parts.append(f"{mode}@{n // MiB}MiB={ratio:.3f}")
    record_verdict(3, "relative-latency", ok, "ratio to baseline " + ", ".join(parts))
    assert ok


def test_plane_ordering(sweep):
    u, k, n = (mean_total(sweep, m, 10 * MiB) for m in ("user", "kernel", "network"))
    ok = u < k < n
    record_verdict(4, "plane-ordering", ok, f"10 MiB user={u * 1e3:.2f} ms kernel={k * 1e3:.2f} ms "
                                           f"network={n * 1e3:.2f} ms")
    assert ok


def test_zero_copy_fallback_differential(sweep):
    ok, deltas = True, []
    for n in SIZES:
        zc, fb = sweep[("network", n)], sweep[("network-fallback", n)]
        ok &= {r.checksum for r in zc} == {r.checksum for r in fb} == {bench.expected_checksum(7, n)}
        deltas.append(f"{n}B:{abs(mean_total(sweep, 'network', n) - mean_total(sweep, 'network-fallback', n)) * 1e3:.3f}ms")
    record_verdict(5, "zero-copy-differential", ok, "identical delivery; |delta mean| " + " ".join(deltas))
    assert ok


PROPERTY_SUITES = [
    "test_core.py::TestEncoding::test_round_trip_against_byte_oracle",
    "test_wasm_host.py::TestMemoryAccess::test_round_trip",
    "test_wasm_host.py::TestMemoryAccess::test_bounds_totality",
    "test_wasm_host.py::TestIsolation::test_operations_on_a_never_touch_b",
    "test_shim.py::TestRoutes::test_determinism_and_workflow_confinement",
    "test_transport_network.py::test_chunk_boundary_sweep",
    "test_transport_network.py::test_descriptor_census_over_burst",
    "test_shim.py::TestDispatch::test_lifecycle_leaves_no_descriptors",
]


def test_property_suites():
    ids = [str(TESTS / node) for node in PROPERTY_SUITES]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                          capture_output=True, text=True, cwd=TESTS.parent, timeout=600)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0
    record_verdict(6, "property-suites", ok, tail)
    assert ok, proc.stdout[-4000:]


def test_fanout_scalability():
    spec = SweepSpec(modes=("user",), sizes=(MiB,), trials=TRIALS, warmup=WARMUP, fanout=(1, 50))
    results = run_fanout(spec)
    expected = bench.expected_checksum(7, MiB)
    checks = all(rep.checksum == expected for res in results for rep in res.reports)
    lat = {d: mean([res.mean_latency for res in results if res.degree == d]) for d in (1, 50)}
    ratio = lat[50] / lat[1]
    ok = checks and ratio <= 3.0 and sum(len(r.reports) for r in results if r.degree == 50) == 50 * TRIALS
    record_verdict(7, "fanout-scalability", ok, f"per-transfer degree1={lat[1] * 1e3:.3f} ms "
                                               f"degree50={lat[50] * 1e3:.3f} ms ratio={ratio:.2f} (need <= 3)")
    assert ok


def test_abi_conformance(tmp_path):
    passed = []
    for name in guest_abi.SAMPLE_GUESTS:
        proc = subprocess.run([sys.executable, "-m", "rrshim", "shim", "check-abi", str(guest_abi.guest_path(name))],
                              capture_output=True, text=True, timeout=60)
        passed.append(proc.returncode == 0)
    mutant = tmp_path / "mutant.wasm"
    mutant.write_bytes(guest_without_export("allocate_memory"))
    with pytest.raises(TransferError) as info:
        guest_abi.check_abi(mutant)
    proc = subprocess.run([sys.executable, "-m", "rrshim", "shim", "check-abi", str(mutant)],
                          capture_output=True, text=True, timeout=60)
    mutant_ok = (info.value.kind is ErrorKind.GuestAbiMissing and proc.returncode == 3
                 and "GuestAbiMissing" in proc.stderr)
    ok = all(passed) and len(passed) == 3 and mutant_ok
    record_verdict(8, "abi-conformance", ok, f"{sum(passed)}/{len(passed)} sample guests pass, "
                                             f"mutant rejected={mutant_ok}")
    assert ok
