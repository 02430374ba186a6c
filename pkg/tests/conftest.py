import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (ok, detail); the line is printed and summarized."""
    number, title = request.node.get_closest_marker("criterion").args

    def record(ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] #{number:<2} {title}" + (f" ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
