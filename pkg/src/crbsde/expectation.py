"""Constrained nonlinear expectation and its property harnesses.

``evaluate`` returns the value at a given level of the smallest constrained
supersolution with terminal data ``X``.  The suites check monotonicity,
self-preservation, time consistency, the zero-one law, and the structural
identities (homogeneity, convexity, translation) under the hypotheses each
one needs; a check whose hypotheses do not hold is reported as skipped.

Events and shifts known at level ``t`` depend on the path, not only on the
stock level, so checks that need them run on the path tree built from the
same grid and market.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import ConfigError, ConstraintSpec, GeneratorSpec, MarketModel, TerminalPayoff, TimeGrid
from .lattice import MAX_TREE_LEVELS, Lattice, build_lattice, build_path_tree
from .solver import PenaltySchedule, SolveResult, solve_constrained_reflected, solve_plain

TREE_LIMIT = 12


@dataclass(frozen=True, eq=False)
class ExpectationInstance:
    gen: GeneratorSpec
    cons: ConstraintSpec
    lat: Lattice
    schedule: PenaltySchedule = PenaltySchedule()

    def __post_init__(self):
        for t in self.lat.grid.times:
            g0 = float(self.gen(float(t), 0.0, 0.0))
            if g0 != 0.0:
                raise ConfigError(f"expectation needs g(t,0,0) = 0; got {g0} at t={t}")
            if not any(lo <= 0.0 <= hi for lo, hi in self.cons.intervals_at(float(t))):
                raise ConfigError(f"expectation needs 0 in the constraint set at t={t}")

    @property
    def slack(self) -> float:
        return 2.0 * self.schedule.stop_tol

    def on(self, lat: Lattice) -> "ExpectationInstance":
        return ExpectationInstance(self.gen, self.cons, lat, self.schedule)

    def tree(self) -> Optional["ExpectationInstance"]:
        """The same instance on the path tree, or None when too deep."""
        if not self.lat.recombining:
            return self
        if self.lat.N > min(TREE_LIMIT, MAX_TREE_LEVELS):
            return None
        return self.on(build_path_tree(self.lat.grid, self.lat.market))


@dataclass
class Evaluation:
    values: np.ndarray
    converged: bool
    result: SolveResult


def solve(inst: ExpectationInstance, X) -> SolveResult:
    res, _ = solve_constrained_reflected(X, inst.gen, inst.cons, None, inst.schedule, inst.lat)
    return res


def evaluate(inst: ExpectationInstance, X, t_level: int) -> Evaluation:
    """Level-``t_level`` values of the constrained expectation of ``X``."""
    if not 0 <= t_level <= inst.lat.N:
        raise ConfigError(f"t_level must be in 0..{inst.lat.N}")
    res = solve(inst, X)
    return Evaluation(res.y.level(t_level).copy(), res.converged, res)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    status: str  # pass | fail | skipped
    witness: Optional[dict] = None
    max_gap: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "witness": self.witness,
            "max_gap": self.max_gap,
            "detail": self.detail,
        }


@dataclass
class Report:
    kind: str
    checks: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if c.status == "fail"]

    @property
    def ok(self) -> bool:
        return not self.failures

    def status(self, name: str) -> str:
        return next(c.status for c in self.checks if c.name == name)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ok": self.ok, "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


AxiomReport = Report
StructureReport = Report


def _node_of(lat: Lattice, flat: int) -> dict:
    i = int(np.searchsorted(lat.offsets, flat, side="right") - 1)
    return {"level": i, "node": int(flat - lat.offsets[i])}


def _compare(name, lat, lhs, rhs, slack, mask=None, one_sided=False, detail="") -> Check:
    """Pass iff ``lhs <= rhs + slack`` (one-sided) or ``|lhs - rhs| <= slack``."""
    gap = lhs - rhs if one_sided else np.abs(lhs - rhs)
    if mask is not None:
        gap = np.where(mask, gap, -np.inf)
    k = int(np.argmax(gap))
    worst = float(max(gap[k], 0.0))
    ok = worst <= slack
    return Check(name, "pass" if ok else "fail", None if ok else _node_of(lat, k), worst, detail)


def _unconverged(name, which) -> Check:
    return Check(name, "fail", None, math.inf, f"penalty schedule did not converge for {which}")


def _on_tree_payoff(X: TerminalPayoff, lat: Lattice, tree: Lattice) -> TerminalPayoff:
    """Carry a payoff given as recombining terminal values over to the path tree."""
    if X.values is None or not lat.recombining:
        return X
    k = np.arange(2**tree.N)
    ups = np.array([bin(v).count("1") for v in k])
    return TerminalPayoff(values=np.asarray(X.values)[ups], name=X.name)


def _terminal(inst: ExpectationInstance, X) -> np.ndarray:
    return X.on_terminal(inst.lat.level_x(inst.lat.N))


def _descendant_mask(tree: Lattice, t: int, pred: np.ndarray) -> np.ndarray:
    """Flat mask over levels >= t: node lies below a level-t node where ``pred`` holds."""
    mask = np.zeros(tree.size, dtype=bool)
    for i in range(t, tree.N + 1):
        k = np.arange(tree.level_size(i))
        mask[tree.level(i)] = pred[tree.ancestor(i, k, t)]
    return mask


def _level_mask(lat: Lattice, t: int) -> np.ndarray:
    return lat.node_level() >= t


def _broadcast_from_level(tree: Lattice, t: int, vals_t: np.ndarray) -> np.ndarray:
    """Extend level-``t`` node values constantly along descendants (NaN above ``t``)."""
    out = np.full(tree.size, np.nan)
    for i in range(t, tree.N + 1):
        k = np.arange(tree.level_size(i))
        out[tree.level(i)] = vals_t[tree.ancestor(i, k, t)]
    return out


# --------------------------------------------------------------------------
# axioms
# --------------------------------------------------------------------------


def axiom_suite(
    inst: ExpectationInstance,
    sample_payoffs: Sequence[TerminalPayoff],
    t_level: Optional[int] = None,
    seed: int = 0,
) -> Report:
    """Monotonicity, self-preservation, time consistency, and the zero-one law."""
    if len(sample_payoffs) < 2:
        raise ConfigError("axiom_suite needs at least two payoffs")
    lat, slack = inst.lat, inst.slack
    t = lat.N // 2 if t_level is None else int(t_level)
    if not 1 <= t <= lat.N:
        raise ConfigError(f"t_level must be in 1..{lat.N}")
    rng = np.random.default_rng(seed)
    rep = Report("axioms")
    sols = [solve(inst, X) for X in sample_payoffs]
    terms = [_terminal(inst, X) for X in sample_payoffs]

    # A1: supplied ordered pairs plus (X_k, max(X_k, X_{k+1}))
    pairs = []
    for a in range(len(sols)):
        for b in range(len(sols)):
            if a != b and np.all(terms[a] <= terms[b]):
                pairs.append((sols[a], sols[b]))
    for a in range(len(sols)):
        hi = np.maximum(terms[a], terms[(a + 1) % len(terms)])
        pairs.append((sols[a], solve(inst, TerminalPayoff(values=hi))))
    worst = None
    for ra, rb in pairs:
        if not (ra.converged and rb.converged):
            worst = _unconverged("A1_monotone", "an ordered pair")
            break
        c = _compare("A1_monotone", lat, ra.y.values, rb.y.values, slack, one_sided=True)
        if worst is None or c.max_gap > worst.max_gap:
            worst = c
    worst.detail = f"{len(pairs)} ordered pairs"
    rep.checks.append(worst)

    # A2: the value at the terminal level is the payoff itself
    gap = max(float(np.max(np.abs(s.y.level(lat.N) - x))) for s, x in zip(sols, terms))
    rep.checks.append(Check("A2_self_preserving", "pass" if gap == 0.0 else "fail", None, gap))

    # A3: re-impose the level-t values as terminal data on the truncated lattice
    sub = inst.on(lat.truncate(t))
    worst = None
    for X, s in zip(sample_payoffs, sols):
        inner = solve(sub, TerminalPayoff(values=s.y.level(t).copy()))
        if not (inner.converged and s.converged):
            worst = _unconverged("A3_time_consistent", X.name)
            break
        n = sub.lat.size
        c = _compare("A3_time_consistent", lat, inner.y.values, s.y.values[:n], slack)
        if worst is None or c.max_gap > worst.max_gap:
            worst = c
    worst.detail = f"inner level {t}"
    rep.checks.append(worst)

    # A4: on the path tree, 1_D E[X] = E[1_D X] below level t
    tinst = inst.tree()
    if tinst is None:
        rep.checks.append(Check("A4_zero_one_law", "skipped", detail=f"path tree limited to N <= {TREE_LIMIT}"))
        return rep
    tree = tinst.lat
    D = rng.random(tree.level_size(t)) < 0.5
    if not D.any():
        D[0] = True
    mask = _descendant_mask(tree, t, D)
    worst = None
    for X in sample_payoffs:
        Xt = _on_tree_payoff(X, lat, tree)
        full = solve(tinst, Xt)
        xt = Xt.on_terminal(tree.level_x(tree.N))
        ind = mask[tree.level(tree.N)]
        restricted = solve(tinst, TerminalPayoff(values=np.where(ind, xt, 0.0)))
        if not (full.converged and restricted.converged):
            worst = _unconverged("A4_zero_one_law", X.name)
            break
        c = _compare(
            "A4_zero_one_law", tree, restricted.y.values, np.where(mask, full.y.values, 0.0),
            slack, mask=_level_mask(tree, t),
        )
        if worst is None or c.max_gap > worst.max_gap:
            worst = c
    worst.detail = f"level {t}, |D| = {int(D.sum())} of {D.size} (path tree)"
    rep.checks.append(worst)
    return rep


# --------------------------------------------------------------------------
# structure
# --------------------------------------------------------------------------

Eta = Union[float, Callable[[np.ndarray], np.ndarray]]


def _hyp_constant(inst):
    if "zero_at_zero_z" not in inst.gen.traits:
        return "needs g(t, y, 0) = 0 for all y"
    return None


def _hyp_homogeneous(inst):
    if "homogeneous" not in inst.gen.traits:
        return "needs a positively homogeneous driver"
    if not inst.cons.is_cone():
        return "needs a cone constraint"
    return None


def _hyp_convex(inst):
    if "convex" not in inst.gen.traits:
        return "needs a convex driver"
    if not inst.cons.is_convex():
        return "needs a convex constraint"
    return None


def _hyp_sublinear(inst):
    return _hyp_homogeneous(inst) or _hyp_convex(inst)


def _hyp_translation(inst):
    if "z_only" not in inst.gen.traits or "z_part_bounded" not in inst.gen.traits:
        return "needs a bounded driver of z alone"
    if inst.cons.depends_on_y:
        return "needs a constraint on z alone"
    return None


def _hyp_discounted(inst):
    a = inst.gen.y_coeff
    if a is None or "z_part_bounded" not in inst.gen.traits:
        return "needs g = g1(z) + a*y with g1 bounded"
    if inst.cons.depends_on_y:
        return "needs a constraint on z alone"
    return None


def _eta_values(eta: Eta, tree: Lattice, t: int) -> np.ndarray:
    x = tree.level_x(t)
    if callable(eta):
        return np.broadcast_to(np.asarray(eta(x), dtype=float), x.shape).copy()
    return np.full(x.shape, float(eta))


def structure_suite(
    inst: ExpectationInstance,
    X1: TerminalPayoff,
    X2: TerminalPayoff,
    c: float = 2.0,
    alpha: float = 0.3,
    eta: Eta = 0.5,
    t_level: int = 0,
) -> Report:
    """Structural identities, each run only when its hypotheses hold.

    ``eta`` is a number or a function of the level-``t_level`` stock price; it
    is extended constantly along descendants.  The discounted translation check
    uses the exact lattice factor ``(1 - a dt)^-(N - i)``; the gap to the
    continuous factor ``exp(a (T - t_i))`` is reported in the check detail.
    """
    if not c > 0:
        raise ConfigError("c must be > 0")
    if not 0 <= alpha <= 1:
        raise ConfigError("alpha must be in [0, 1]")
    lat, slack = inst.lat, inst.slack
    rep = Report("structure")
    x1 = _terminal(inst, X1)
    x2 = _terminal(inst, X2)
    s1 = solve(inst, X1)
    s2 = solve(inst, X2)
    base_ok = s1.converged and s2.converged

    def run(name, hyp, body):
        why = hyp(inst)
        if why:
            rep.checks.append(Check(name, "skipped", detail=why))
            return
        if not base_ok:
            rep.checks.append(_unconverged(name, "X1/X2"))
            return
        rep.checks.append(body())

    def const_check():
        cval = float(np.mean(x1))
        r = solve(inst, TerminalPayoff.constant(cval))
        if not r.converged:
            return _unconverged("constant_preserving", "a constant")
        return _compare("constant_preserving", lat, r.y.values, np.full(lat.size, cval), 1e-12,
                        detail=f"C = {cval!r}")

    def homog_check():
        r = solve(inst, TerminalPayoff(values=c * x1))
        if not r.converged:
            return _unconverged("positive_homogeneity", "c*X1")
        return _compare("positive_homogeneity", lat, r.y.values, c * s1.y.values, slack,
                        detail=f"c = {c}")

    def convex_check():
        r = solve(inst, TerminalPayoff(values=alpha * x1 + (1 - alpha) * x2))
        if not r.converged:
            return _unconverged("convexity", "the mixture")
        rhs = alpha * s1.y.values + (1 - alpha) * s2.y.values
        return _compare("convexity", lat, r.y.values, rhs, slack, one_sided=True,
                        detail=f"alpha = {alpha}")

    def subadd_check():
        r = solve(inst, TerminalPayoff(values=x1 + x2))
        if not r.converged:
            return _unconverged("subadditivity", "X1 + X2")
        return _compare("subadditivity", lat, r.y.values, s1.y.values + s2.y.values, slack,
                        one_sided=True)

    def shift_check(name, discounted):
        def body():
            if t_level == 0:
                tinst = inst
            else:
                tinst = inst.tree()
                if tinst is None:
                    return Check(name, "skipped", detail=f"path tree limited to N <= {TREE_LIMIT}")
            tree = tinst.lat
            ev = _eta_values(eta, tree, t_level)
            shift_flat = _broadcast_from_level(tree, t_level, ev)
            Xt = _on_tree_payoff(X1, lat, tree)
            xt = Xt.on_terminal(tree.level_x(tree.N))
            base = solve(tinst, Xt)
            shifted = solve(tinst, TerminalPayoff(values=xt + shift_flat[tree.level(tree.N)]))
            if not (base.converged and shifted.converged):
                return _unconverged(name, "X1 + eta")
            lv = tree.node_level()
            mask = lv >= t_level
            detail = f"t_level = {t_level}"
            if discounted:
                a = inst.gen.y_coeff
                factor = (1.0 - a * tree.dt) ** (-(tree.N - lv).astype(float))
                cont = np.exp(a * (tree.grid.T - lv * tree.dt))
                cgap = float(np.nanmax(np.where(mask, np.abs(factor - cont) * np.abs(shift_flat), np.nan)))
                detail += f", a = {a}, lattice factor; continuous-factor gap {cgap:.3e}"
            else:
                factor = np.ones(tree.size)
            expect = base.y.values + np.where(mask, shift_flat * factor, 0.0)
            return _compare(name, tree, shifted.y.values, expect, slack, mask=mask, detail=detail)

        return body

    run("constant_preserving", _hyp_constant, const_check)
    run("positive_homogeneity", _hyp_homogeneous, homog_check)
    run("convexity", _hyp_convex, convex_check)
    run("subadditivity", _hyp_sublinear, subadd_check)
    run("translation_invariance", _hyp_translation, shift_check("translation_invariance", False))
    run("discounted_translation", _hyp_discounted, shift_check("discounted_translation", True))
    return rep


# --------------------------------------------------------------------------
# risk measure
# --------------------------------------------------------------------------


@dataclass
class RiskReport:
    rho: np.ndarray
    rho_bar: np.ndarray
    dominates: bool
    max_shortfall: float
    witness: Optional[dict]
    converged: bool

    @property
    def premium(self) -> float:
        """Extra capital the constraint demands at the root."""
        return float(self.rho[0] - self.rho_bar[0])

    def to_dict(self) -> dict:
        return {
            "rho_root": float(self.rho[0]),
            "rho_bar_root": float(self.rho_bar[0]),
            "dominates": self.dominates,
            "max_shortfall": self.max_shortfall,
            "witness": self.witness,
            "converged": self.converged,
        }


def risk_measure(inst: ExpectationInstance, X: TerminalPayoff, t_level: Optional[int] = None) -> RiskReport:
    """``rho = E_constrained[-X]`` against the unconstrained ``rho_bar``.

    With ``t_level`` the returned arrays are that level's values; otherwise
    they cover every node.  Dominance is always checked at every node.
    """
    neg = TerminalPayoff(values=-_terminal(inst, X))
    r = solve(inst, neg)
    rb = solve_plain(neg, inst.gen, inst.lat)
    short = rb.y.values - r.y.values
    k = int(np.argmax(short))
    worst = float(max(short[k], 0.0))
    ok = worst <= inst.slack
    if t_level is None:
        rho, rho_bar = r.y.values.copy(), rb.y.values.copy()
    else:
        rho, rho_bar = r.y.level(t_level).copy(), rb.y.level(t_level).copy()
    return RiskReport(rho, rho_bar, ok, worst, None if ok else _node_of(inst.lat, k), r.converged)


# --------------------------------------------------------------------------
# default corpus
# --------------------------------------------------------------------------


@dataclass
class CorpusEntry:
    name: str
    inst: ExpectationInstance
    payoffs: list
    eta: Eta
    t_level: int


def _random_constraint(rng, sigma) -> ConstraintSpec:
    kind = rng.integers(0, 7)
    if kind == 0:
        return ConstraintSpec()
    if kind == 1:
        return ConstraintSpec(((0.0, None),))
    if kind == 2:
        return ConstraintSpec(((None, 0.0),))
    if kind == 3:
        a, b = rng.uniform(0.02, 0.3, size=2)
        return ConstraintSpec(((-a, b),))
    if kind == 4:
        return ConstraintSpec(((round(-rng.uniform(0.1, 1.0), 3), None),), units="shares", sigma=sigma)
    if kind == 5:
        return ConstraintSpec(((None, -0.5), (-0.05, 0.1)))
    return ConstraintSpec(units="amount", sigma=sigma, wealth_bounds=(None, 1.0))


def _random_payoffs(rng, x0) -> list:
    k1, k2 = x0 * rng.uniform(0.85, 1.15, size=2)
    lev = rng.uniform(0.2, 1.0)
    return [
        TerminalPayoff.call(float(k1)),
        TerminalPayoff.put(float(k2)),
        TerminalPayoff(lambda x, lev=lev, k=k1: lev * np.tanh((x - k) / x0) + 0.3, name="tanh"),
        TerminalPayoff(lambda x, k=k2: np.where(x > k, 0.2, -0.1), name="digital"),
    ]


def default_corpus(seed: int = 0, size: int = 20) -> list[CorpusEntry]:
    """Seeded random driver/constraint/payoff instances for the property suites."""
    rng = np.random.default_rng(seed)
    out = []
    for n in range(size):
        market = MarketModel(
            x0=1.0,
            mu_drift=float(rng.uniform(0.0, 0.1)),
            sigma=float(rng.uniform(0.15, 0.35)),
            r=float(rng.uniform(0.0, 0.06)),
        )
        N = int(rng.integers(6, 11))
        grid = TimeGrid(1.0, N)
        form = rng.integers(0, 5)
        if form == 0:
            gen = GeneratorSpec.linear_wealth(market.r, market.mu_drift, market.sigma)
        elif form == 1:
            gen = GeneratorSpec.parametric(c_z=float(rng.uniform(0.1, 0.6)), a_z=float(rng.uniform(-0.2, 0.2)))
        elif form == 4:
            gen = GeneratorSpec.parametric(c_z=float(rng.uniform(-0.4, 0.6)), z_cap=float(rng.uniform(0.1, 0.8)))
        elif form == 2:
            gen = GeneratorSpec.parametric(
                a_y=float(rng.uniform(-0.2, 0.2)), c_z=float(rng.uniform(0.1, 0.5)),
                z_cap=float(rng.uniform(0.2, 1.0)),
            )
        else:
            gen = GeneratorSpec.parametric(
                a_y=float(rng.uniform(-0.3, 0.3)), a_z=float(rng.uniform(-0.4, 0.4)),
                c_y=float(rng.uniform(0.0, 0.2)), c_z=float(rng.uniform(-0.2, 0.4)),
            )
        cons = _random_constraint(rng, market.sigma)
        inst = ExpectationInstance(gen, cons, build_lattice(grid, market))
        t_level = int(rng.integers(0, N // 2 + 1))
        shift = float(rng.uniform(-0.5, 0.5))
        eta: Eta = shift if t_level == 0 else (lambda x, s=shift: s * np.sign(x - 1.0) + 0.1)
        out.append(CorpusEntry(f"instance_{n:02d}", inst, _random_payoffs(rng, market.x0), eta, t_level))
    return out
