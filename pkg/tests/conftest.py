import shutil
import sys
import tempfile
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from rrshim import guest_abi  # noqa: E402
from rrshim.wasm_host import WasmHost  # noqa: E402

# Instances come from function-scoped fixtures that build fresh state per call.
settings.register_profile("rrshim", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("rrshim")

SMALL_MEMORY = 16 * 1024 * 1024


@pytest.fixture(scope="session", autouse=True)
def built_guests():
    return guest_abi.build_guests()


@pytest.fixture
def host():
    return WasmHost()


@pytest.fixture
def make_instance(host):
    def make(name="consumer", max_memory=SMALL_MEMORY, **kw):
        return host.instantiate(guest_abi.guest_path(name), max_memory, **kw)
    return make


@pytest.fixture
def runtime_dir():
    # Unix socket paths are limited to ~108 bytes, so stay short.
    path = Path(tempfile.mkdtemp(prefix="rr-", dir="/tmp"))
    yield path
    shutil.rmtree(path, ignore_errors=True)


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
