import numpy as np
import pytest
from helpers import random_constraint, random_generator, random_payoff
from hypothesis import given
from hypothesis import strategies as st

from crbsde import (
    ConstraintSpec,
    GeneratorSpec,
    InputError,
    MarketModel,
    ObstacleSpec,
    PenaltySchedule,
    TerminalPayoff,
    TimeGrid,
    build_lattice,
    solve_constrained_reflected,
    solve_plain,
)
from crbsde.decomposition import accumulate, decompose_submartingale, decompose_supermartingale

M = MarketModel(x0=1.0, mu_drift=0.08, sigma=0.2, r=0.05)
WEALTH = GeneratorSpec.linear_wealth(M.r, M.mu_drift, M.sigma)
ZERO = GeneratorSpec.zero()
CONE = ConstraintSpec(((0.0, None),))


@pytest.fixture(scope="module")
def lat():
    return build_lattice(TimeGrid(1.0, 30), M)


def test_supermartingale_round_trip(lat):
    put = ObstacleSpec.lower(lambda t, x: np.maximum(1.0 - x, 0.0))
    res, rep = solve_constrained_reflected(TerminalPayoff.put(1.0), WEALTH, CONE, put, PenaltySchedule(), lat)
    assert rep.converged
    d = decompose_supermartingale(res.y, WEALTH, CONE, lat)
    assert d.is_decomposable and d.witness is None and d.first_failing_level is None
    assert np.max(np.abs(d.z.values - res.z.values)) <= 1e-8
    assert np.max(np.abs(d.A.values - res.dA.values - res.dAbar.values)) <= 1e-8


def test_constant_is_a_martingale(lat):
    d = decompose_supermartingale(np.full(lat.size, 0.3), ZERO, CONE, lat)
    assert d.is_decomposable
    assert np.all(d.A.values == 0.0) and np.all(d.z.values == 0.0)


def test_upward_jump_is_rejected(lat):
    d = decompose_supermartingale(lat.t.copy(), ZERO, None, lat)
    assert not d.is_decomposable
    assert d.witness is not None and set(d.witness) == {"level", "node"}
    assert d.first_failing_level is not None


def test_wrong_shape_is_input_error(lat):
    with pytest.raises(InputError):
        decompose_supermartingale(np.zeros(5), ZERO, None, lat)
    with pytest.raises(InputError):
        decompose_supermartingale(np.full(lat.size, np.nan), ZERO, None, lat)


def test_martingale_has_null_compensator(lat):
    cm, rep = solve_constrained_reflected(TerminalPayoff.put(1.0), ZERO, CONE, None, PenaltySchedule(), lat)
    assert rep.converged
    s = decompose_submartingale(cm.y.values, ZERO, CONE, lat)
    assert s.is_decomposable
    assert np.nanmax(np.abs(s.K.values)) == 0.0


def test_drift_compensator_recovered(lat):
    base = solve_plain(TerminalPayoff.put(1.0), ZERO, lat)
    Y = base.y.values + 0.01 * lat.t
    s = decompose_submartingale(Y, ZERO, None, lat)
    assert s.is_decomposable
    assert np.nanmax(np.abs(s.K.values - 0.01 * lat.t)) <= 2 * PenaltySchedule().stop_tol
    assert s.shifted_residual <= 1e-8


def test_constrained_submartingale_by_construction(lat):
    cm, _ = solve_constrained_reflected(TerminalPayoff.call(1.0), ZERO, CONE, None, PenaltySchedule(), lat)
    Y = cm.y.values + 0.02 * lat.t**2
    s = decompose_submartingale(Y, ZERO, CONE, lat)
    assert s.is_decomposable
    assert s.shifted_residual <= 1e-8


def test_submartingale_hypotheses(lat):
    Y = np.zeros(lat.size)
    with pytest.raises(InputError, match="0 in the constraint"):
        decompose_submartingale(Y, ZERO, ConstraintSpec(((0.1, None),)), lat)
    with pytest.raises(InputError, match="y dependence"):
        decompose_submartingale(Y, ZERO, ConstraintSpec(units="amount", sigma=0.2, wealth_bounds=(None, 1.0)), lat)
    with pytest.raises(InputError, match="g\\(t, z\\)"):
        decompose_submartingale(Y, GeneratorSpec.parametric(c_y=0.2), None, lat)


def test_accumulate_marks_path_dependence():
    lat = build_lattice(TimeGrid(1.0, 3), M)
    inc = np.zeros(lat.size)
    inc[lat.offsets[1]] = 1.0  # push only after the first down move
    K = accumulate(lat, inc)
    assert np.isnan(K[lat.level(2)][1])
    assert np.isnan(K[lat.level(3)][1:3]).all()
    assert np.all(K[lat.level(1)] == 0.0)


@given(seed=st.integers(0, 10**6))
def test_compensator_properties(seed):
    """K is nonnegative, pushes only on contact, and the shifted equation holds."""
    rng = np.random.default_rng(seed)
    lat = build_lattice(TimeGrid(1.0, 8), M)
    gen = GeneratorSpec.parametric(a_y=float(rng.uniform(-0.2, 0.2)), c_z=float(rng.uniform(0.0, 0.5)))
    cons = ConstraintSpec(((float(-rng.uniform(0, 0.3)), float(rng.uniform(0, 0.3))),))
    X = random_payoff(rng)
    base, rep = solve_constrained_reflected(X, gen, cons, None, PenaltySchedule(), lat)
    Y = base.y.values + float(rng.uniform(0.0, 0.05)) * lat.t
    s = decompose_submartingale(Y, gen, cons, lat)
    slack = 2 * PenaltySchedule().stop_tol
    assert np.all(s.dK.values >= 0.0)
    assert np.nanmin(s.K.values) >= 0.0
    assert s.off_contact_push <= slack
    assert s.shifted_residual <= 1e-8


@given(seed=st.integers(0, 10**6))
def test_supermartingale_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    lat = build_lattice(TimeGrid(1.0, 8), M)
    gen = random_generator(rng, lat.market)
    cons = random_constraint(rng, lat.market.sigma)
    res, rep = solve_constrained_reflected(random_payoff(rng), gen, cons, None, PenaltySchedule(), lat)
    if not rep.converged:
        return
    d = decompose_supermartingale(res.y, gen, cons, lat)
    assert d.is_decomposable
    assert np.max(np.abs(d.z.values - res.z.values)) <= 1e-8
    assert np.max(np.abs(d.A.values - res.dA.values - res.dAbar.values)) <= 1e-8
