import numpy as np
import pytest

from jumpland.cli import plan_reference
from jumpland.config import RunConfig


@pytest.fixture(scope="session")
def cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def plan08(cfg):
    """The default 0.8 m forward jump: (knots, flight joints, reference motion)."""
    return plan_reference(cfg, cfg.plan.command())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
