import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, checks, detail=""):
        ok = all(checks.values())
        failed = [name for name, good in checks.items() if not good]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"
        if failed:
            line += f" (failed: {', '.join(failed)})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok, failed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
