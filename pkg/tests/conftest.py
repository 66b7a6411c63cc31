import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wholebody_lift.skeleton import default_topology


@pytest.fixture(scope="session")
def topo():
    return default_topology()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    lines = [v for k, v in report.user_properties if k == "criterion"]
    if not lines:
        lines = [f"FAIL {report.nodeid.split('::')[-1]}: {report.outcome} before a result was recorded"]
    _CRITERIA.extend(lines)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
