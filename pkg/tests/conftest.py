import time

import pytest

_LINES = pytest.StashKey[list]()


class AcceptanceRecorder:
    """Prints and records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, config, reporter):
        self.config = config
        self.reporter = reporter

    def run(self, number: int, title: str, limit_s: float, body) -> None:
        start = time.perf_counter()
        detail, ok = "", False
        try:
            detail = body() or ""
            elapsed = time.perf_counter() - start
            assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s:.0f}s"
            ok = True
        except AssertionError as exc:
            detail = f"{exc}".splitlines()[0] if str(exc) else "assertion failed"
            raise
        finally:
            elapsed = time.perf_counter() - start
            line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  [{elapsed:.1f}s]  {detail}".rstrip()
            self.config.stash.setdefault(_LINES, []).append(line)
            print(line)
            if self.reporter is not None:
                self.reporter.write_line(line)


@pytest.fixture
def acceptance(request):
    return AcceptanceRecorder(request.config, request.config.pluginmanager.get_plugin("terminalreporter"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
