import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(number, passed, detail=""):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append((number, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
