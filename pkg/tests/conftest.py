import os
import warnings
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict; printed in the terminal summary."""

    def _report(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"acceptance {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_boundary_warnings():
    from callmix.gausslik import BoundaryWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        yield


REAL_DATA = os.environ.get("CALLMIX_REAL_DATA")


def real_data_dir() -> Path:
    if not REAL_DATA or not Path(REAL_DATA).is_dir():
        pytest.skip("set CALLMIX_REAL_DATA to a directory with arrivals.csv, calendar.csv, services.csv")
    return Path(REAL_DATA)
