from __future__ import annotations

import pytest

from protomesh.clock import run_virtual


@pytest.fixture
def virtual():
    """Run a coroutine function on a fresh virtual-time loop."""

    def run(fn, *args, **kwargs):
        return run_virtual(fn(*args, **kwargs))

    return run


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
