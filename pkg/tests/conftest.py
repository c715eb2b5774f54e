import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pabtrack.grid import RateGrid
from pabtrack.topology import Topology

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return RateGrid(1, 8)


@pytest.fixture
def fig3_topology():
    # two paths sharing the middle link
    return Topology(n_links=3, path_links=((0, 1), (1, 2)))


@pytest.fixture(scope="module")
def receiver_process(tmp_path_factory):
    """A ``pabtrack probe recv`` in its own process, so it never competes with the sender's pacing."""
    import subprocess
    import sys

    log = tmp_path_factory.mktemp("recv") / "receipts.jsonl"
    proc = subprocess.Popen(
        [sys.executable, "-m", "pabtrack.cli", "probe", "recv", "--host", "127.0.0.1", "--port", "0",
         "--log", str(log)],
        stderr=subprocess.PIPE, text=True,
    )
    line = proc.stderr.readline()
    host, port = line.split()[-1].rsplit(":", 1)
    yield (host, int(port)), log
    proc.terminate()
    proc.wait(timeout=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
