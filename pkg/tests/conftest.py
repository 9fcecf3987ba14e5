import numpy as np
import pytest

from mlad import backend


@pytest.fixture(params=backend.available())
def backend_name(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_symmetric(rng, n, scale=1.0):
    a = rng.normal(size=(n, n)) * scale
    return 0.5 * (a + a.T)


# acceptance verdicts: one line per criterion, printed after the run
VERDICTS = {}


def record_verdict(number, name, ok, detail):
    VERDICTS[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        name, ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
