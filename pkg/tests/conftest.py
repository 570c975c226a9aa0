import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mglab import operators as op
from mglab import scenarios as S

settings.register_profile("lab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture(scope="session")
def bm1():
    return op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.const_drift([0.0]))


@pytest.fixture(scope="session")
def ou():
    return S.ou_spec()


@pytest.fixture(scope="session")
def interval():
    return S.interval_boundary()


@pytest.fixture(scope="session")
def disk():
    return S.disk_tangential()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def _report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
