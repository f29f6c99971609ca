import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL/SKIP line per acceptance criterion."""

    def record(number, title, status, detail=""):
        if not isinstance(status, str):
            status = "PASS" if status else "FAIL"
        line = f"criterion {number:>2} {status:<4} {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return status

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
