import numpy as np
import pytest

from hetdiff.schedule import build_quadratic_schedule

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def sched():
    return build_quadratic_schedule(50, 1e-4, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Print and record one PASS/FAIL line, then assert on it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def check(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
