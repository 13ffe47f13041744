import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medvis.numerics import precision

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    results = getattr(test_acceptance, "RESULTS", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, seconds, budget = results[n]
        terminalreporter.write_line(
            f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}  ({seconds:.1f}s, budget {budget:.0f}s)")
