import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pathhedge.path_core import DiscretePath, TimeGrid

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def linear_path(n_points=9, T=1.0, slope=1.0):
    grid = TimeGrid.uniform(T, n_points)
    return DiscretePath(grid, slope * grid.points)


def brownian_path(seed, sigma=0.2, n_points=2**14 + 1, T=1.0, s0=0.0):
    rng = np.random.default_rng(seed)
    grid = TimeGrid.uniform(T, n_points)
    inc = sigma * np.sqrt(T / (n_points - 1)) * rng.standard_normal(n_points - 1)
    return DiscretePath(grid, s0 + np.concatenate([[0.0], np.cumsum(inc)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Print and record one PASS/FAIL line for an acceptance criterion."""
    def emit(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
