import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
