import numpy as np
import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}
_TABLES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``criterion(number, passed, detail)`` records an acceptance verdict for the summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)
    return record


@pytest.fixture(scope="session")
def result_table():
    """Queue a formatted table for the terminal summary."""
    return _TABLES.append


def pytest_terminal_summary(terminalreporter):
    for table in _TABLES:
        terminalreporter.section("experiment table")
        for line in table.rstrip().splitlines():
            terminalreporter.write_line(line)
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
