import numpy as np
import pytest

from feelpower.channel import build_config, sample_channels
from feelpower.problem import AllocationProblem

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def make_problem(seed=0, **kw):
    cfg = build_config(**kw)
    return AllocationProblem.from_config(cfg, sample_channels(cfg, seed))


def central_diff(f, x, h=None):
    """Central finite-difference gradient with a per-coordinate step."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        step = 1e-6 * (1.0 + abs(x[j])) if h is None else h
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


@pytest.fixture
def prob():
    return make_problem(seed=0)


@pytest.fixture
def small_prob():
    return make_problem(seed=3, num_nodes=2, num_devices=4)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
