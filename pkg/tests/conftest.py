import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    """Record one acceptance verdict; the lines are echoed in the terminal summary."""

    def _report(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] #{number} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
