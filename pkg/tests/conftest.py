import numpy as np
import pytest

from neurostate.montage import default_template

# Populated by tests/test_acceptance.py; echoed after the run so the
# per-criterion verdict lines survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
