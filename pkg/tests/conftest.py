import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the verdict line for one acceptance criterion."""

    def _report(n: int, ok: bool, detail: str) -> None:
        _LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
