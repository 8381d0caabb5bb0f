import contextlib
import time

import pytest

_LINES = pytest.StashKey[list]()


class Criterion:
    """Collects sub-checks for one acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []
        self.note = ""  # headline figure shown on the PASS line
        self.t0 = time.perf_counter()

    def check(self, detail: str, ok) -> bool:
        ok = bool(ok)
        self.checks.append((detail, ok))
        return ok

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)

    def line(self, error: BaseException | None = None) -> str:
        status = "PASS" if self.ok and error is None else "FAIL"
        failed = [d for d, ok in self.checks if not ok]
        if error is not None:
            tail = f"error: {error!r}"
        elif failed:
            tail = "; ".join(failed)
        else:
            tail = "; ".join(x for x in (self.note, f"{len(self.checks)} checks") if x)
        return f"[{status}] criterion {self.number:>2}: {self.title} ({tail}; {self.elapsed:.1f}s)"


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c: c.check(detail, ok)``; prints one line and fails on any miss."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            line = c.line(exc)
            lines.append((number, line))
            print(line)
            raise
        line = c.line()
        lines.append((number, line))
        print(line)
        failed = [d for d, ok in c.checks if not ok]
        assert c.ok, f"criterion {number} failed: {failed}"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
