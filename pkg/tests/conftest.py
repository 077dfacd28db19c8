import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wfquench.core import GhostSeries, Worldline
from wfquench.matching import SolveConfig
from wfquench.quench import QuenchConfig, solve_stage

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def orbit20():
    """Converged symmetric orbit at r_c = 20, quenched from F = 1 - 0/r."""
    cfg = SolveConfig(r_c=20.0)
    return solve_stage(GhostSeries((0.0, 0.0)), cfg, QuenchConfig())


@pytest.fixture(scope="session")
def cfg20():
    return SolveConfig(r_c=20.0)


def static_pair(x0, t_half=200.0, n=801):
    """Two particles held at rest at +x0 and -x0."""
    t = np.linspace(-t_half, t_half, n)
    zero = np.zeros_like(t)
    return Worldline(t, zero + x0, zero), Worldline(t, zero - x0, zero)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
