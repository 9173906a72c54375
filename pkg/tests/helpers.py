"""Random small instances shared by several test modules."""

import numpy as np

from crbsde import (
    ConstraintSpec,
    GeneratorSpec,
    MarketModel,
    ObstacleSpec,
    TerminalPayoff,
    TimeGrid,
    build_lattice,
)

# (criterion number, summary line), filled by the acceptance tests
ACCEPTANCE_LINES: list = []


def random_market(rng) -> MarketModel:
    return MarketModel(
        x0=1.0,
        mu_drift=float(rng.uniform(-0.05, 0.12)),
        sigma=float(rng.uniform(0.1, 0.4)),
        r=float(rng.uniform(0.0, 0.08)),
    )


def random_generator(rng, market=None) -> GeneratorSpec:
    kind = rng.integers(0, 3)
    if kind == 0 and market is not None:
        return GeneratorSpec.linear_wealth(market.r, market.mu_drift, market.sigma)
    if kind == 1:
        return GeneratorSpec.parametric(c_z=float(rng.uniform(-0.5, 0.5)), z_cap=float(rng.uniform(0.1, 2.0)))
    return GeneratorSpec.parametric(
        a_y=float(rng.uniform(-0.4, 0.4)), a_z=float(rng.uniform(-0.4, 0.4)),
        c_y=float(rng.uniform(-0.2, 0.2)), c_z=float(rng.uniform(-0.3, 0.3)),
        k0=float(rng.uniform(-0.1, 0.1)),
    )


def random_constraint(rng, sigma) -> ConstraintSpec:
    kind = rng.integers(0, 6)
    if kind == 0:
        return ConstraintSpec()
    if kind == 1:
        return ConstraintSpec(((0.0, None),))
    if kind == 2:
        a = float(rng.uniform(-0.3, 0.0))
        return ConstraintSpec(((a, a + float(rng.uniform(0.0, 0.4))),))
    if kind == 3:
        return ConstraintSpec(((None, -0.2), (0.05, 0.1), (0.3, None)))
    if kind == 4:
        return ConstraintSpec(((float(rng.uniform(-1.0, 0.5)), None),), units="shares", sigma=sigma)
    return ConstraintSpec(units="amount", sigma=sigma, wealth_bounds=(None, float(rng.uniform(0.5, 2.0))))


def random_payoff(rng) -> TerminalPayoff:
    k = float(rng.uniform(0.85, 1.15))
    kind = rng.integers(0, 4)
    if kind == 0:
        return TerminalPayoff.call(k)
    if kind == 1:
        return TerminalPayoff.put(k)
    a, b = rng.normal(size=2)
    if kind == 2:
        return TerminalPayoff(lambda x: a * np.sin(6 * x) + b, name="sin")
    return TerminalPayoff(lambda x: np.where(x > k, a, b), name="step")


def random_lower_obstacle(rng, X: TerminalPayoff, lat):
    """A lower barrier below the payoff at maturity."""
    k = float(rng.uniform(0.9, 1.1))
    term = X.on_terminal(lat.level_x(lat.N))
    floor = float(term.min())
    return ObstacleSpec.lower(
        lambda t, x: np.where(np.asarray(t) < lat.grid.T - 1e-12, np.maximum(k - x, 0.0) + floor - 0.1, floor)
    )


def random_instance(seed: int, N: int = 6, with_obstacle: bool = True):
    rng = np.random.default_rng(seed)
    market = random_market(rng)
    lat = build_lattice(TimeGrid(1.0, N), market)
    gen = random_generator(rng, market)
    cons = random_constraint(rng, market.sigma)
    X = random_payoff(rng)
    obstacle = random_lower_obstacle(rng, X, lat) if with_obstacle and rng.random() < 0.5 else None
    return dict(rng=rng, market=market, lat=lat, gen=gen, cons=cons, X=X, obstacle=obstacle)
