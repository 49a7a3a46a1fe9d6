import sys

import pytest

from objproc.cluster import cluster_up
from objproc.transport import TransportConfig

HOOK = "objproc_testkit:register"


def sim(n=1, latency=0.0, seed=0, root=None):
    return cluster_up(n, TransportConfig(backend="sim", sim_latency=latency, sim_seed=seed, root=root, register=(HOOK,)))


def sock(n=1, root=None):
    return cluster_up(n, TransportConfig(backend="socket", root=root, register=(HOOK,), call_timeout=60.0))


@pytest.fixture
def sim4(tmp_path):
    with sim(4, root=tmp_path) as c:
        yield c


@pytest.fixture(params=["sim", "socket"])
def cluster3(request, tmp_path):
    make = sim if request.param == "sim" else sock
    with make(3, root=tmp_path) as c:
        yield c


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
