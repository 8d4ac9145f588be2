import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail, seconds, budget)``."""

    def record(n, passed, detail, seconds, budget):
        ok = passed and seconds < budget
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail} ({seconds:.1f} s / {budget:g} s)"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
