import sys
import pathlib

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_RESULTS = []


@pytest.fixture
def record():
    """``record(tag, passed, detail)`` logs one acceptance line."""
    def _record(tag, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {tag}: {detail}"
        _RESULTS.append(line)
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
