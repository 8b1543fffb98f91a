"""Shared pytest configuration: helper imports and the acceptance recap."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (criterion number, name, status, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, status, detail in sorted(ACCEPTANCE_RESULTS):
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(
            f"criterion {num:2d} {status:4s} {name}{suffix}")
