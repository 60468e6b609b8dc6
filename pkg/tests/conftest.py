import pytest

_verdicts = {}


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for the acceptance summary, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}"
        _verdicts[number] = line + (f"  [{detail}]" if detail else "")
        print(_verdicts[number])
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[number])
