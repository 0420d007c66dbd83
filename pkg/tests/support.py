"""Small helpers shared by several test modules."""

import os
import time


def open_fds() -> set[int]:
    return {int(n) for n in os.listdir("/proc/self/fd")}


def settle_fds(baseline: set[int], timeout: float = 2.0) -> set[int]:
    """Descriptors still open beyond ``baseline`` once server threads wind down."""
    deadline = time.monotonic() + timeout
    while True:
        extra = open_fds() - baseline
        if not extra or time.monotonic() > deadline:
            return extra
        time.sleep(0.02)


def guest_with(extra: str, base: str = "echo") -> bytes:
    """A sample guest with extra WAT functions spliced in before the closing paren."""
    import wasmtime
    from rrshim import guest_abi

    text = guest_abi.guest_source(base).rstrip()
    assert text.endswith(")")
    return wasmtime.wat2wasm(text[:-1] + "\n" + extra + "\n)")


def guest_without_export(export: str, base: str = "echo") -> bytes:
    """A sample guest whose named export has been stripped."""
    import wasmtime
    from rrshim import guest_abi

    text = guest_abi.guest_source(base)
    marker = f'(export "{export}")'
    assert marker in text
    return wasmtime.wat2wasm(text.replace(marker, ""))


# Acceptance verdicts, printed by the terminal-summary hook in conftest.
ACCEPTANCE_LINES: list[str] = []


def record_verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
