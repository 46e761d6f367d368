import numpy as np
import pytest

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, passed, detail)``."""

    def record(name, passed, detail=""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
