import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: dict[int, str] = {}


class CriterionCheck:
    def __init__(self, number: int):
        self.number = number
        self.failures: list[str] = []
        self.notes: list[str] = []
        self.start = time.perf_counter()

    def check(self, ok, message: str):
        if not ok:
            self.failures.append(message)
        return bool(ok)

    def note(self, message: str):
        self.notes.append(message)

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion():
    """``with criterion(n) as c: c.check(...)`` records one pass/fail line per criterion."""

    @contextmanager
    def run(number: int):
        c = CriterionCheck(number)
        try:
            yield c
        except Exception as e:  # recorded, then re-raised
            c.failures.append(f"{type(e).__name__}: {e}")
            _record(c)
            raise
        _record(c)
        assert not c.failures, "; ".join(c.failures)

    return run


def _record(c: CriterionCheck):
    status = "PASS" if not c.failures else "FAIL"
    detail = "; ".join(c.failures + c.notes)
    line = f"criterion {c.number:>2}: {status} ({c.elapsed:.1f} s) {detail}".rstrip()
    CRITERIA[c.number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
