import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one acceptance line; the assert stays in the test."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _RESULTS[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
