import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def record(number, name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda x: x[0]):
            terminalreporter.write_line(line)
