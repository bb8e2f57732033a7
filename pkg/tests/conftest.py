import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
        print(line)
        _VERDICTS.append((n, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
