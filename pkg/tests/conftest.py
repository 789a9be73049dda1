import numpy as np
import pytest

from gcnsnet.data import make_synthetic

_acceptance = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_task():
    """The desk-scale task used by the convergence checks."""
    return make_synthetic(n_channels=16, n_per_class=500, n_classes=4, seed=1, separation=3.0)


def random_symmetric_weights(rng, n, density=0.6):
    w = rng.uniform(0.05, 1.0, size=(n, n)) * (rng.random((n, n)) < density)
    w = np.triu(w, 1)
    return w + w.T


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _acceptance.items():
        name = nodeid.split("::")[-1]
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{label:4s}  {name}")
