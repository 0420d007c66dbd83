import subprocess
import sys

import numpy as np
import pytest
import wasmtime
from hypothesis import given, settings, strategies as st

from oracles import FNV_OFFSET, fnv1a64, lcg_bytes
from rrshim import guest_abi
from rrshim.core import MemoryRegion, checksum64
from rrshim.errors import GuestAbiMissing
from support import guest_with, guest_without_export

def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "rrshim", "shim", *args], capture_output=True, text=True)


class TestConformance:
    @pytest.mark.parametrize("name", guest_abi.SAMPLE_GUESTS)
    def test_sample_guests_conform(self, name):
        report = guest_abi.check_abi(guest_abi.guest_path(name))
        assert report.ok and report.problems() == []

    @pytest.mark.parametrize("export", sorted(guest_abi.REQUIRED_EXPORTS))
    def test_each_missing_export_is_reported(self, export):
        with pytest.raises(GuestAbiMissing, match=export):
            guest_abi.check_abi(guest_without_export(export))

    def test_missing_memory_export(self):
        with pytest.raises(GuestAbiMissing, match="memory"):
            guest_abi.check_abi(guest_without_export("memory"))

    def test_signature_mismatch(self):
        text = guest_abi.guest_source("echo").replace('(export "checksum")', "")
        text = text.rstrip()[:-1] + '(func (export "checksum") (param i32 i32) (result i32) i32.const 0))'
        with pytest.raises(GuestAbiMissing, match="checksum"):
            guest_abi.check_abi(wasmtime.wat2wasm(text))

    def test_foreign_import(self):
        text = guest_abi.guest_source("echo").replace(
            "(module", '(module (import "wasi_snapshot_preview1" "fd_write" (func (param i32 i32 i32 i32) (result i32)))', 1)
        with pytest.raises(GuestAbiMissing, match="fd_write"):
            guest_abi.check_abi(wasmtime.wat2wasm(text))

    def test_extra_exports_are_allowed(self):
        assert guest_abi.check_abi(guest_with('(func (export "extra"))')).ok

    def test_not_wasm(self):
        with pytest.raises(GuestAbiMissing):
            guest_abi.check_abi(b"not a module")

    def test_cli_accepts_samples(self):
        for name in guest_abi.SAMPLE_GUESTS:
            out = run_cli("check-abi", str(guest_abi.guest_path(name)))
            assert out.returncode == 0, out.stdout + out.stderr

    def test_cli_rejects_mutant(self, tmp_path):
        path = tmp_path / "mutant.wasm"
        path.write_bytes(guest_without_export("run"))
        out = run_cli("check-abi", str(path))
        assert out.returncode == 3
        assert "GuestAbiMissing" in out.stderr and "run" in out.stderr


class TestGuestBehaviour:
    def test_echo_locates_hello(self, make_instance):
        inst = make_instance("echo")
        r = inst.guest_alloc(5)
        inst.write_memory_host(b"hello", r.offset)
        inst.write_mailbox(r)
        inst.invoke("run")
        (cap,) = inst.take_captures()
        assert inst.read_memory_host(cap.region) == bytes([0x68, 0x65, 0x6C, 0x6C, 0x6F])

    def test_empty_mailbox_gives_empty_window(self, make_instance):
        inst = make_instance("echo")
        inst.write_mailbox(MemoryRegion(guest_abi.HEAP_BASE, 0))
        inst.invoke("run")
        (cap,) = inst.take_captures()
        assert cap.region.length == 0

    def test_consumer_reads_abc(self, make_instance):
        inst = make_instance("consumer")
        r = inst.guest_alloc(3)
        inst.write_memory_host(b"abc", r.offset)
        inst.write_mailbox(r)
        inst.invoke("run")
        assert inst.invoke("last_checksum")[0] & (2**64 - 1) == fnv1a64(b"abc")
        assert inst.invoke("received") == [1]

    def test_consumer_zero_length(self, make_instance):
        inst = make_instance("consumer")
        inst.write_mailbox(MemoryRegion(guest_abi.HEAP_BASE, 0))
        inst.invoke("run")
        assert inst.invoke("last_checksum")[0] & (2**64 - 1) == FNV_OFFSET

    def test_consumer_one_mebibyte(self, make_instance):
        inst = make_instance("consumer")
        data = np.random.default_rng(1).integers(0, 256, 1 << 20, dtype=np.uint8)
        r = inst.guest_alloc(data.size)
        inst.write_memory_host(data, r.offset)
        inst.write_mailbox(r)
        inst.invoke("run")
        assert inst.invoke("last_checksum")[0] & (2**64 - 1) == checksum64(data)

    def test_producer_matches_reference_generator(self, make_instance):
        inst = make_instance("producer")
        offset = inst.invoke("produce", 7, 5000)[0]
        (cap,) = inst.take_captures()
        assert cap.region == MemoryRegion(offset, 5000)
        data = inst.read_memory_host(cap.region)
        assert data == lcg_bytes(7, 5000)
        assert inst.checksum(cap.region) == fnv1a64(lcg_bytes(7, 5000))

    def test_producer_run_reannounces(self, make_instance):
        inst = make_instance("producer")
        inst.invoke("produce", 1, 10)
        first = inst.take_captures()
        inst.invoke("run")
        assert inst.take_captures()[0].region == first[0].region

    def test_producer_discard_frees(self, make_instance):
        inst = make_instance("producer")
        a = inst.invoke("produce", 1, 4096)[0]
        inst.invoke("discard")
        b = inst.invoke("produce", 2, 4096)[0]
        assert a == b

    @settings(max_examples=40)
    @given(seed=st.integers(0, 2**64 - 1), n=st.integers(1, 3000))
    def test_producer_determinism(self, make_instance, seed, n):
        a, b = make_instance("producer"), make_instance("producer")
        outs = []
        for inst in (a, b):
            inst.invoke("produce", seed - 2**64 if seed >= 2**63 else seed, n)
            (cap,) = inst.take_captures()
            outs.append(inst.read_memory_host(cap.region))
        assert outs[0] == outs[1] == lcg_bytes(seed, n)


class TestHostGenerators:
    @pytest.mark.parametrize("n", [0, 1, 255, 4096, 70_001])
    def test_fast_generator_equals_reference(self, n):
        fast = guest_abi.generate_payload(11, n).tobytes()
        assert fast == guest_abi.reference_generator(11, n) == lcg_bytes(11, n)

    def test_output_uses_the_high_byte(self):
        # the top byte does not repeat with period 256 the way the low byte would
        data = lcg_bytes(3, 1024)
        assert data[:256] != data[256:512]
        assert guest_abi.reference_generator(3, 1024) == data
