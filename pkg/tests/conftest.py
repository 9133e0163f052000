import pytest

from pigpaxos.core import ClusterConfig


def make_config(n, r=1, **kw):
    """Cluster config with a fixed bootstrap leader so runs skip the election."""
    kw.setdefault("bootstrap_leader", 0)
    return ClusterConfig(n=n, relay_groups=r, **kw)


@pytest.fixture
def config_factory():
    return make_config


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
