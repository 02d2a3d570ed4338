import numpy as np
import pytest

from tdfodom.synthetic import corridor_config, corridor_sequence, write_sequence

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, status, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{status}] {num:>2}. {name}: {detail}")


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL/SKIP line per criterion; printed in the terminal summary."""

    def record(num, name, passed, detail, skipped=False):
        status = "SKIP" if skipped else ("PASS" if passed else "FAIL")
        request.config.stash[ACCEPTANCE].append((num, name, status, detail))
        print(f"[{status}] {num}. {name}: {detail}")
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def short_corridor():
    """10 m traverse with default sensor noise."""
    return corridor_sequence(length=10.0, seed=7)


@pytest.fixture(scope="session")
def short_corridor_config():
    return corridor_config(10.0)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """6 m corridor written to disk in the native formats; returns the manifest path."""
    seq = corridor_sequence(length=6.0, seed=3)
    out = tmp_path_factory.mktemp("mini")
    return write_sequence(seq, out, corridor_config(6.0))
