import pytest

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per criterion, then assert on it."""

    def record(name: str, ok: bool, detail: str = "", soft: bool = False):
        tag = "PASS" if ok else ("WARN" if soft else "FAIL")
        line = f"{tag}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        if not soft:
            assert ok, line

    return record
