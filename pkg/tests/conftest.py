import numpy as np
import pytest


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "numpy":
        monkeypatch.setenv("LPDNET_DISABLE_NUMBA", "1")
    else:
        monkeypatch.delenv("LPDNET_DISABLE_NUMBA", raising=False)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion lines from test_acceptance, repeated after the run so they show
# up in the log even when output capture hides passing tests
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
