import numpy as np
import pytest

from deeppyram.tensor import default_dtype

_CRITERIA = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def criterion(request):
    """Record one acceptance line; tests that crash before recording are reported as FAIL."""
    title = request.node.function.__doc__.strip().splitlines()[0]
    seen = []

    def record(ok, detail):
        seen.append(ok)
        _CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    yield record
    if not seen:
        _CRITERIA.append(f"[FAIL] {title}: did not complete")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
