import numpy as np
import pytest
from hypothesis import settings

from crbsde import MarketModel, TimeGrid, build_lattice

settings.register_profile("crbsde", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("crbsde")


@pytest.fixture
def market():
    return MarketModel(x0=1.0, mu_drift=0.08, sigma=0.2, r=0.05)


@pytest.fixture
def small_lattice(market):
    return build_lattice(TimeGrid(1.0, 6), market)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
