import pytest

CRITERIA_LINES = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number, passed, text):
        CRITERIA_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}"
        print(CRITERIA_LINES[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[number])
