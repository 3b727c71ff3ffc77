from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from helpers import ACCEPTANCE_LINES
from talbotqkd.talbot import GddSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def gdd() -> GddSpec:
    return GddSpec(12900.0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
