from __future__ import annotations

import shutil
import time
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repairkit", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repairkit")

HAS_INFER = shutil.which("infer") is not None
requires_infer = pytest.mark.skipif(not HAS_INFER, reason="infer is not installed")


# -- acceptance criteria reporting -------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


class Criterion:
    """Times one acceptance criterion and records a single pass/fail line."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""
        self.limit: float | None = None

    def __enter__(self) -> Criterion:
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        elapsed = time.perf_counter() - self._start
        ok = exc_type is None
        if ok and self.limit is not None and elapsed >= self.limit:
            ok = False
            self.detail = f"{self.detail}; runtime {elapsed:.1f}s exceeds {self.limit:.0f}s".lstrip("; ")
        if exc is not None:
            first = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            self.detail = f"{self.detail}; {first}".lstrip("; ")
        line = f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {self.detail} ({elapsed:.1f}s)"
        print(line)
        ACCEPTANCE_LINES[self.number] = line
        if exc_type is None and not ok:
            raise AssertionError(line)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
