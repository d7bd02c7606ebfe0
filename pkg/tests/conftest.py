import pytest

_RESULTS: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the caller still asserts."""
    def record(name: str, ok: bool, detail: str) -> bool:
        _RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
