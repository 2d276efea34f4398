import re

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance criterion named in the test function."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))
    seen = []

    def report(ok: bool, detail: str):
        seen.append(ok)
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _VERDICTS[number]

    yield report
    if not seen:
        _VERDICTS[number] = f"criterion {number:2d}: FAIL  raised before reaching a verdict"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
