import pytest

ACCEPTANCE = {}
N_CRITERIA = 10


@pytest.fixture
def record_criterion():
    """Store ``(passed, detail)`` for an acceptance criterion; the summary prints them in order."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        passed, detail = ACCEPTANCE.get(n, (False, "not reached"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
