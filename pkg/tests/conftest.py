import numpy as np
import pytest

from manyiv.nkpc_dgp import DgpCalibration, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240615)


@pytest.fixture(scope="session")
def simulated_problem():
    """One dataset from the strongest design cell."""
    calib = DgpCalibration(a21=0.45, a22=0.45, a23=0.45)
    return calib, simulate_dataset(calib, np.random.default_rng(11))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the terminal summary."""

    def record(name, passed, detail=""):
        _CRITERIA[name] = ("PASS" if passed is True else "FAIL" if passed is False else passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status:4s}  {name}" + (f"  ({detail})" if detail else ""))
