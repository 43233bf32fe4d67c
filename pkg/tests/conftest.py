import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
