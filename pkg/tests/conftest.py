import numpy as np
import pytest

from hasmm.model import reference_instance
from hasmm.volterra import build_table, default_grid


@pytest.fixture(scope="session")
def ref3():
    return reference_instance(3)


@pytest.fixture(scope="session")
def ref3_table(ref3):
    return build_table(ref3)


@pytest.fixture(scope="session")
def toy():
    return reference_instance(kind="toy")


@pytest.fixture(scope="session")
def toy_table(toy):
    return build_table(toy, default_grid(toy, dt=0.1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
