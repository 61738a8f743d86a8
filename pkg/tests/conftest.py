import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stamp import kernel as K

K.tune_allocator()

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _modes():
    prev = K.is_deterministic()
    yield
    K.set_deterministic(prev)


_CRITERIA: dict[str, str] = {}


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the terminal summary prints them all."""

    def record(key: str, ok: bool, detail: str) -> None:
        line = f"criterion {key:<12} {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[key] = line
        print(line)

    return record


def _order(key: str):
    head, _, tail = key.partition(" ")
    return (int(head) if head.isdigit() else 99, tail)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_CRITERIA, key=_order):
            terminalreporter.write_line(_CRITERIA[key])
