import math

import numpy as np
import pytest
from helpers import random_instance
from hypothesis import given
from hypothesis import strategies as st

from crbsde import (
    ConfigError,
    ConstraintSpec,
    GeneratorSpec,
    InputError,
    MarketModel,
    ObstacleSpec,
    PenaltySchedule,
    TerminalPayoff,
    TimeGrid,
    build_lattice,
    compare_solutions,
    solve_constrained_reflected,
    solve_penalized,
    solve_plain,
    solve_reflected,
)
from crbsde.oracle import black_scholes_call
from crbsde.solver import equation_residual, implicit_step, obstacle_violation

seeds = st.integers(0, 10**6)


def _bisect(f, a, b):
    fa = f(a)
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = f(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


# --------------------------------------------------------------------------
# implicit step
# --------------------------------------------------------------------------


def test_implicit_step_zero_driver():
    assert implicit_step(5.0, 0.3, 0.0, GeneratorSpec.zero(), 0.0, 0.1) == 5.0


def test_implicit_step_linear_closed_form():
    g = GeneratorSpec.parametric(a_y=-0.1)
    y = implicit_step(1.0, 0.0, 0.0, g, 0.0, 0.01)
    assert y == pytest.approx(1.0 / 1.001, abs=1e-15)


def test_implicit_step_sin_against_bisection():
    g = GeneratorSpec(lambda t, y, z: 0.5 * np.sin(y), lipschitz_mu=0.5, name="sin")
    y = implicit_step(0.3, 0.0, 0.0, g, 0.0, 0.1)
    ref = _bisect(lambda v: v - 0.3 - 0.05 * math.sin(v), -2.0, 2.0)
    assert abs(y - ref) <= 1e-12


def test_implicit_step_contraction_precondition():
    with pytest.raises(ConfigError):
        implicit_step(1.0, 0.0, 0.0, GeneratorSpec.parametric(a_y=20.0), 0.0, 0.1)


# --------------------------------------------------------------------------
# plain solve
# --------------------------------------------------------------------------


def test_plain_constant_is_martingale(small_lattice):
    res = solve_plain(TerminalPayoff.constant(2.5), GeneratorSpec.zero(), small_lattice)
    assert np.all(res.y.values == 2.5)
    assert np.all(res.z.values == 0.0)


def test_plain_stock_replication_without_risk_premium():
    m = MarketModel(x0=1.3, mu_drift=0.04, sigma=0.25, r=0.04)
    lat = build_lattice(TimeGrid(1.0, 50), m)
    res = solve_plain(TerminalPayoff.stock(), GeneratorSpec.linear_wealth(m.r, m.mu_drift, m.sigma), lat)
    assert res.root == pytest.approx(1.3, rel=1e-12)


def test_plain_call_against_black_scholes():
    m = MarketModel(x0=100.0, mu_drift=0.08, sigma=0.2, r=0.05)
    lat = build_lattice(TimeGrid(1.0, 200), m)
    res = solve_plain(TerminalPayoff.call(100.0), GeneratorSpec.linear_wealth(m.r, m.mu_drift, m.sigma), lat)
    bs = black_scholes_call(100.0, 100.0, 0.05, 0.2, 1.0)
    assert abs(res.root - bs) <= 0.005 * bs


# --------------------------------------------------------------------------
# penalized solve
# --------------------------------------------------------------------------


def test_zero_penalty_equals_plain(small_lattice):
    gen = GeneratorSpec.parametric(a_y=-0.1, c_z=0.2)
    X = TerminalPayoff.put(1.0)
    plain = solve_plain(X, gen, small_lattice)
    pen = solve_penalized(X, gen, ConstraintSpec(((0.0, None),)), 0.0,
                          ObstacleSpec.lower(lambda t, x: 0.0 * x - 5.0), 0.0, small_lattice)
    assert np.array_equal(plain.y.values, pen.y.values)


def test_root_nondecreasing_in_constraint_penalty():
    lat = build_lattice(TimeGrid(1.0, 20), MarketModel(x0=1.0, mu_drift=0.05, sigma=0.2))
    X = TerminalPayoff(lambda x: -x, name="neg_stock")
    cons = ConstraintSpec(((0.0, None),))
    roots = [solve_penalized(X, GeneratorSpec.zero(), cons, n, None, math.inf, lat).root
             for n in [0.0] + [2.0**k for k in range(12)] + [math.inf]]
    assert np.all(np.diff(roots) >= -1e-12)
    assert roots[-1] > roots[0]


@given(seed=seeds)
def test_monotone_penalization_nodewise(seed):
    d = random_instance(seed)
    res, rep = solve_constrained_reflected(d["X"], d["gen"], d["cons"], d["obstacle"],
                                           PenaltySchedule(), d["lat"], keep_iterates=True)
    for a, b in zip(rep.iterates, rep.iterates[1:]):
        assert np.all(b >= a - 1e-12)


# --------------------------------------------------------------------------
# reflected solve
# --------------------------------------------------------------------------


def test_absent_obstacle_equals_plain(small_lattice):
    gen = GeneratorSpec.parametric(a_y=0.1, a_z=-0.2)
    X = TerminalPayoff.call(1.0)
    a = solve_reflected(X, gen, ObstacleSpec.lower(lambda t, x: np.full_like(x, -np.inf)), small_lattice)
    assert np.array_equal(a.y.values, solve_plain(X, gen, small_lattice).y.values)
    assert np.all(a.dAbar.values == 0.0)


def test_toy_lower_barrier():
    lat = build_lattice(TimeGrid(2.0, 8), MarketModel(x0=1.0, mu_drift=0.0, sigma=0.2))
    L = ObstacleSpec.lower(lambda t, x: np.where(np.asarray(t) <= 1.0 + 1e-12, 1.0, -np.inf))
    res = solve_reflected(TerminalPayoff.constant(0.0), GeneratorSpec.zero(), L, lat)
    assert res.root == 1.0
    t = lat.t
    assert np.all(res.y.values[t < 1.0] == 1.0)
    assert np.all(res.y.values[t > 1.0] == 0.0)


def test_american_put_above_european():
    m = MarketModel(x0=100.0, mu_drift=0.08, sigma=0.2, r=0.05)
    lat = build_lattice(TimeGrid(1.0, 200), m)
    gen = GeneratorSpec.linear_wealth(m.r, m.mu_drift, m.sigma)
    X = TerminalPayoff.put(100.0)
    am = solve_reflected(X, gen, ObstacleSpec.lower(lambda t, x: np.maximum(100.0 - x, 0.0)), lat)
    eu = solve_plain(X, gen, lat)
    assert am.root - eu.root > 0
    assert np.all(am.y.values >= eu.y.values - 1e-12)


def test_upper_obstacle_caps_value(small_lattice):
    X = TerminalPayoff.call(1.0)
    U = ObstacleSpec.upper(lambda t, x: np.maximum(x - 1.0, 0.0) + 0.01)
    res = solve_reflected(X, GeneratorSpec.zero(), U, small_lattice)
    assert np.all(res.y.values <= res.obstacle + 1e-15)
    assert res.dK.values.sum() > 0
    assert res.diagnostics.skorokhod_residual == 0.0


def test_terminal_obstacle_violation_is_input_error(small_lattice):
    with pytest.raises(InputError, match="terminal"):
        solve_reflected(TerminalPayoff.constant(0.0), GeneratorSpec.zero(),
                        ObstacleSpec.lower(lambda t, x: np.full_like(x, 0.5)), small_lattice)
    with pytest.raises(InputError, match="terminal"):
        solve_reflected(TerminalPayoff.constant(1.0), GeneratorSpec.zero(),
                        ObstacleSpec.upper(lambda t, x: np.full_like(x, 0.5)), small_lattice)


def test_upper_obstacle_rejects_wealth_dependent_constraint(small_lattice):
    cons = ConstraintSpec(units="amount", sigma=0.2, wealth_bounds=(None, 1.0))
    with pytest.raises(ConfigError, match="upper obstacle"):
        solve_constrained_reflected(TerminalPayoff.constant(0.0), GeneratorSpec.zero(), cons,
                                    ObstacleSpec.upper(lambda t, x: np.full_like(x, 1.0)),
                                    PenaltySchedule(), small_lattice)


def test_empty_wealth_dependent_set_names_node(small_lattice):
    cons = ConstraintSpec(units="amount", sigma=0.2, wealth_bounds=(1.0, 2.0))
    with pytest.raises(ConfigError, match=r"level \d+, node \d+"):
        solve_penalized(TerminalPayoff.constant(-1.0), GeneratorSpec.zero(), cons, math.inf,
                        None, math.inf, small_lattice)


def test_contraction_violation_names_max_dt():
    lat = build_lattice(TimeGrid(1.0, 2), MarketModel(x0=1.0, mu_drift=0.0, sigma=0.2))
    with pytest.raises(ConfigError, match="max admissible dt"):
        solve_plain(TerminalPayoff.constant(1.0), GeneratorSpec.parametric(a_y=3.0), lat)


# --------------------------------------------------------------------------
# constrained-reflected driver
# --------------------------------------------------------------------------


def test_trivial_constraint_converges_at_first_level(small_lattice):
    gen = GeneratorSpec.linear_wealth(0.05, 0.08, 0.2)
    X = TerminalPayoff.put(1.0)
    L = ObstacleSpec.lower(lambda t, x: np.maximum(1.0 - x, 0.0))
    res, rep = solve_constrained_reflected(X, gen, ConstraintSpec(), L, PenaltySchedule(), small_lattice)
    assert rep.converged and len(rep.rows) == 2
    assert np.array_equal(res.y.values, solve_reflected(X, gen, L, small_lattice).y.values)


def test_schedule_modes_agree_small_instance():
    m = MarketModel(x0=1.0, mu_drift=0.08, sigma=0.2, r=0.05)
    lat = build_lattice(TimeGrid(1.0, 20), m)
    gen = GeneratorSpec.linear_wealth(m.r, m.mu_drift, m.sigma)
    cons = ConstraintSpec(((0.0, None),), units="shares", sigma=m.sigma)
    L = ObstacleSpec.lower(lambda t, x: np.maximum(1.0 - x, 0.0))
    sched = PenaltySchedule.powers_of_two(0, 40)
    roots = []
    for mode in ("obstacle_first", "constraint_first", "diagonal"):
        res, rep = solve_constrained_reflected(TerminalPayoff.put(1.0), gen, cons, L, sched.with_mode(mode), lat)
        assert rep.converged, mode
        roots.append(res.root)
    assert max(roots) - min(roots) <= 2 * sched.stop_tol


def test_exhausted_schedule_is_flagged(small_lattice):
    X = TerminalPayoff(lambda x: -5.0 * x, name="neg_stock")
    res, rep = solve_constrained_reflected(X, GeneratorSpec.zero(), ConstraintSpec(((0.0, None),)), None,
                                           PenaltySchedule(max_levels=2), small_lattice)
    assert not rep.converged and not res.converged
    assert len(rep.rows) == 3


def test_convergence_csv(tmp_path, small_lattice):
    _, rep = solve_constrained_reflected(TerminalPayoff.put(1.0), GeneratorSpec.zero(),
                                         ConstraintSpec(((0.0, None),)), None, PenaltySchedule(), small_lattice)
    rep.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "penalty_level,root_value,max_violation,converged"
    assert lines[-1].endswith("true") and lines[1].endswith("false")


def test_schedule_validation():
    with pytest.raises(ConfigError):
        PenaltySchedule(levels=(2.0, 1.0))
    with pytest.raises(ConfigError):
        PenaltySchedule(stop_tol=0.0)
    with pytest.raises(ConfigError):
        PenaltySchedule(mode="sideways")


@given(seed=seeds)
def test_solution_invariants(seed):
    d = random_instance(seed)
    sched = PenaltySchedule()
    res, rep = solve_constrained_reflected(d["X"], d["gen"], d["cons"], d["obstacle"], sched, d["lat"])
    assert rep.converged
    for f in (res.dA, res.dAbar, res.dK):
        assert np.all(f.values >= 0.0)
    assert np.all(res.dA.values * res.dK.values == 0.0)
    assert np.all(res.dAbar.values * res.dK.values == 0.0)
    assert np.max(np.abs(equation_residual(res, d["gen"]))) <= 1e-10
    assert abs(res.diagnostics.skorokhod_residual) <= 1e-12
    assert res.diagnostics.max_constraint_violation <= max(math.sqrt(sched.stop_tol), 1e-3)
    assert obstacle_violation(res) == 0.0


@given(seed=seeds)
def test_upper_obstacle_invariants(seed):
    d = random_instance(seed, with_obstacle=False)
    if d["cons"].depends_on_y:
        return
    lat = d["lat"]
    term = d["X"].on_terminal(lat.level_x(lat.N))
    cap = float(term.max())
    U = ObstacleSpec.upper(lambda t, x: np.where(np.asarray(t) < lat.grid.T - 1e-12, 0.5 * x - 0.45 + cap, cap))
    res, rep = solve_constrained_reflected(d["X"], d["gen"], d["cons"], U, PenaltySchedule(), lat)
    assert rep.converged
    assert np.all(res.dA.values * res.dK.values == 0.0)
    assert np.all(res.y.values <= res.obstacle + 1e-12)
    assert np.max(np.abs(equation_residual(res, d["gen"]))) <= 1e-10
    assert abs(res.diagnostics.skorokhod_residual) <= 1e-12


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


def test_compare_identical_inputs(small_lattice):
    a = solve_plain(TerminalPayoff.call(1.0), GeneratorSpec.zero(), small_lattice)
    b = solve_plain(TerminalPayoff.call(1.0), GeneratorSpec.zero(), small_lattice)
    v = compare_solutions(a, b)
    assert v.a_le_b and v.b_le_a and v.max_excess == 0.0


def test_compare_wider_constraint_is_cheaper(small_lattice):
    gen = GeneratorSpec.linear_wealth(0.05, 0.08, 0.2)
    X = TerminalPayoff.put(1.0)
    wide, _ = solve_constrained_reflected(X, gen, ConstraintSpec(), None, PenaltySchedule(), small_lattice)
    narrow, _ = solve_constrained_reflected(X, gen, ConstraintSpec(((0.0, None),)), None,
                                            PenaltySchedule(), small_lattice)
    assert compare_solutions(wide, narrow).ordered
    assert not compare_solutions(narrow, wide).ordered


def test_compare_rejects_mismatched_lattices(small_lattice, market):
    other = build_lattice(TimeGrid(1.0, 5), market)
    a = solve_plain(TerminalPayoff.call(1.0), GeneratorSpec.zero(), small_lattice)
    b = solve_plain(TerminalPayoff.call(1.0), GeneratorSpec.zero(), other)
    with pytest.raises(InputError):
        compare_solutions(a, b)


@given(seed=seeds, which=st.sampled_from(["payoff", "driver", "constraint", "obstacle"]))
def test_comparison_property(seed, which):
    d = random_instance(seed)
    lat, gen, cons, X, ob = d["lat"], d["gen"], d["cons"], d["X"], d["obstacle"]
    rng = d["rng"]
    gen2, cons2, X2, ob2 = gen, cons, X, ob
    if which == "payoff":
        bump = rng.uniform(0.0, 0.3, lat.N + 1)
        X2 = TerminalPayoff(values=X.on_terminal(lat.level_x(lat.N)) + bump)
    elif which == "driver":
        if gen.params is None:
            return
        p = dict(zip(("a_y", "a_z", "c_y", "c_z", "k0", "z_cap"), gen.params))
        p["k0"] += float(rng.uniform(0.0, 0.2))
        gen2 = GeneratorSpec.parametric(**p)
    elif which == "constraint":
        cons = ConstraintSpec()
    else:
        if ob is None:
            return
        ob2 = ObstacleSpec.lower(lambda t, x: ob.level(t, x) + np.where(np.asarray(t) < lat.grid.T - 1e-12, 0.05, 0.0))
    a, ra = solve_constrained_reflected(X, gen, cons, ob, PenaltySchedule(), lat)
    b, rb = solve_constrained_reflected(X2, gen2, cons2, ob2, PenaltySchedule(), lat)
    assert ra.converged and rb.converged
    v = compare_solutions(a, b)
    assert v.ordered, (which, v.max_excess, v.witness)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------


@given(seed=seeds)
def test_backend_parity(seed):
    d = random_instance(seed)
    if d["gen"].params is None:
        return
    args = (d["X"], d["gen"], d["cons"], 3.0, d["obstacle"], math.inf, d["lat"])
    a = solve_penalized(*args, backend="numba")
    b = solve_penalized(*args, backend="numpy")
    assert a.diagnostics.backend == "numba" and b.diagnostics.backend == "numpy"
    for f in ("y", "z", "zraw", "dA", "dAbar", "dK"):
        assert np.allclose(getattr(a, f).values, getattr(b, f).values, rtol=0, atol=1e-12), f


def test_backend_env_flag(monkeypatch, small_lattice):
    gen = GeneratorSpec.parametric(a_y=-0.1)
    monkeypatch.setenv("CRBSDE_BACKEND", "numpy")
    assert solve_plain(TerminalPayoff.put(1.0), gen, small_lattice).diagnostics.backend == "numpy"
    monkeypatch.setenv("CRBSDE_BACKEND", "numba")
    assert solve_plain(TerminalPayoff.put(1.0), gen, small_lattice).diagnostics.backend == "numba"


def test_custom_driver_uses_numpy_kernel(small_lattice):
    gen = GeneratorSpec(lambda t, y, z: 0.3 * np.sin(y), lipschitz_mu=0.3, name="sin")
    res = solve_plain(TerminalPayoff.put(1.0), gen, small_lattice, backend="numba")
    assert res.diagnostics.backend == "numpy"
