import pytest

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def acceptance_report():
    def record(number: int, passed: bool, text: str):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {text}"
    return record
