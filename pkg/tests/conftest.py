import numpy as np
import pytest

from deepcs import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(64):
        yield


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(label, ok, detail)`` records one pass/fail line and asserts ``ok``."""
    def record(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
