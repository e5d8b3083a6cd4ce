import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def _report(number, title, checks, seconds, budget):
        checks = dict(checks)
        checks["runtime"] = seconds < budget
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        limit = f"/{budget:g}s" if budget != float("inf") else ""
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}) {seconds:.1f}s{limit}"
        if failed:
            line += " failed: " + ", ".join(failed)
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok, failed
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
