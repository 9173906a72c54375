"""American and European options under portfolio constraints.

Wealth follows the linear driver ``g(t, y, z) = -r y - theta z`` with market
price of risk ``theta = (mu_drift - r)/sigma``; ``z = sigma * amount`` where
``amount`` is the money held in stock.  An American price is the smallest
constrained supersolution reflected off the exercise value.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, ConstraintSpec, GeneratorSpec, MarketModel, ObstacleSpec, TerminalPayoff, TimeGrid
from .lattice import Lattice, NodeField, build_lattice
from .solver import ConvergenceReport, PenaltySchedule, SolveResult, solve_constrained_reflected

CONTACT_TOL = 1e-8
IDENTITY_TOL = 0.005

__all__ = [
    "MarketModel",
    "OptionSpec",
    "PriceReport",
    "price",
    "exercise_boundary",
    "identity_suite",
    "no_short_selling",
    "no_borrowing",
    "short_only",
]


@dataclass(frozen=True)
class OptionSpec:
    kind: str = "put"  # call | put | custom
    strike: float = 100.0
    exercise: str = "american"  # american | european
    payoff: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("call", "put", "custom"):
            raise ConfigError(f"option.kind must be call|put|custom, got {self.kind!r}")
        if self.exercise not in ("american", "european"):
            raise ConfigError(f"option.exercise must be american|european, got {self.exercise!r}")
        if self.kind == "custom" and self.payoff is None:
            raise ConfigError("custom option needs a payoff function")
        if self.kind != "custom" and not self.strike > 0:
            raise ConfigError("option.strike must be > 0")

    def intrinsic(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "call":
            return np.maximum(x - self.strike, 0.0)
        if self.kind == "put":
            return np.maximum(self.strike - x, 0.0)
        return np.asarray(self.payoff(x), dtype=float)


def no_short_selling(market: MarketModel) -> ConstraintSpec:
    """Holdings in stock must be nonnegative."""
    return ConstraintSpec(((0.0, None),), units="shares", sigma=market.sigma)


def short_only(market: MarketModel) -> ConstraintSpec:
    """Holdings in stock must be nonpositive."""
    return ConstraintSpec(((None, 0.0),), units="shares", sigma=market.sigma)


def no_borrowing(market: MarketModel) -> ConstraintSpec:
    """Money in stock may not exceed current wealth."""
    return ConstraintSpec(units="amount", sigma=market.sigma, wealth_bounds=(None, 1.0))


@dataclass
class ExerciseBoundary:
    kind: str
    levels: list  # per level: critical stock price or None
    contact: list  # per level: stock prices of contact nodes

    def to_rows(self, lat: Lattice):
        for i, b in enumerate(self.levels):
            yield i, float(lat.grid.times[i]), b


@dataclass
class PriceReport:
    price: float
    option: OptionSpec
    market: MarketModel
    z: NodeField
    pi: NodeField  # shares: z / (sigma X)
    amount: NodeField  # money in stock: z / sigma
    exercise_boundary: Optional[ExerciseBoundary]
    constrained: bool
    convergence: ConvergenceReport
    result: SolveResult

    @property
    def converged(self) -> bool:
        return self.convergence.converged

    def to_dict(self) -> dict:
        b = self.exercise_boundary
        return {
            "price": self.price,
            "option": {"kind": self.option.kind, "strike": self.option.strike, "exercise": self.option.exercise},
            "market": dict(self.market.__dict__),
            "constrained": self.constrained,
            "converged": self.converged,
            "intrinsic_at_root": float(self.option.intrinsic(self.market.x0)),
            "max_constraint_violation": self.result.diagnostics.max_constraint_violation,
            "skorokhod_residual": self.result.diagnostics.skorokhod_residual,
            "convergence": self.convergence.to_dict(),
            "exercise_boundary": None if b is None else b.levels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hedge_csv(self, path) -> None:
        lat = self.result.lattice
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "node", "stock", "value", "z", "pi", "amount"])
            for i in range(lat.N):
                s = lat.level(i)
                for j, (x, y, z, p, a) in enumerate(zip(
                    lat.x[s], self.result.y.values[s], self.z.values[s], self.pi.values[s], self.amount.values[s]
                )):
                    w.writerow([i, j, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(p)), repr(float(a))])

    def boundary_csv(self, path) -> None:
        lat = self.result.lattice
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "time", "boundary"])
            if self.exercise_boundary is not None:
                for i, t, b in self.exercise_boundary.to_rows(lat):
                    w.writerow([i, repr(t), "" if b is None else repr(b)])


def wealth_driver(market: MarketModel) -> GeneratorSpec:
    return GeneratorSpec.linear_wealth(market.r, market.mu_drift, market.sigma)


def price(
    option: OptionSpec,
    market: MarketModel,
    cons: Optional[ConstraintSpec],
    grid: TimeGrid,
    schedule: PenaltySchedule = PenaltySchedule(),
    backend=None,
) -> PriceReport:
    """Superhedging price of ``option`` with hedges restricted to ``cons``."""
    market.require_elliptic()
    if cons is not None and cons.sigma is not None and cons.sigma != market.sigma:
        raise ConfigError(f"constraint sigma {cons.sigma} differs from market sigma {market.sigma}")
    lat = build_lattice(grid, market)
    gen = wealth_driver(market)
    X = TerminalPayoff(option.intrinsic, name=option.kind)
    obstacle = None
    if option.exercise == "american":
        obstacle = ObstacleSpec.lower(lambda t, x: option.intrinsic(x))
    res, rep = solve_constrained_reflected(X, gen, cons, obstacle, schedule, lat, backend=backend)
    z = res.z.values
    pi = np.zeros(lat.size)
    n = int(lat.offsets[lat.N])
    pi[:n] = z[:n] / (market.sigma * lat.x[:n])
    amount = np.zeros(lat.size)
    amount[:n] = z[:n] / market.sigma
    report = PriceReport(
        price=res.root, option=option, market=market, z=res.z, pi=NodeField(lat, pi),
        amount=NodeField(lat, amount), exercise_boundary=None,
        constrained=cons is not None and not cons.is_trivial, convergence=rep, result=res,
    )
    if option.exercise == "american":
        report.exercise_boundary = exercise_boundary(report)
    return report


def exercise_boundary(report: PriceReport, tol: float = CONTACT_TOL) -> ExerciseBoundary:
    """Per level, the stock prices where the value meets a positive exercise value.

    Puts report the largest such price and calls the smallest; other payoffs
    report None and keep only the contact sets.
    """
    res = report.result
    lat = res.lattice
    kind = report.option.kind
    levels, contact = [], []
    for i in range(lat.N + 1):
        s = lat.level(i)
        x = lat.x[s]
        S = report.option.intrinsic(x)
        hit = (S > 0) & (np.abs(res.y.values[s] - S) <= tol)
        xs = x[hit]
        contact.append(xs.tolist())
        if xs.size == 0 or kind == "custom":
            levels.append(None)
        else:
            levels.append(float(xs.max() if kind == "put" else xs.min()))
    return ExerciseBoundary(kind, levels, contact)


@dataclass
class IdentityCheck:
    name: str
    constrained: float
    unconstrained: float
    rel_gap: float
    converged: bool

    @property
    def ok(self) -> bool:
        return self.converged and self.rel_gap <= IDENTITY_TOL

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ok"] = self.ok
        return d


@dataclass
class IdentityReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "tolerance": IDENTITY_TOL, "checks": [c.to_dict() for c in self.checks]}


def identity_suite(
    market: MarketModel = MarketModel(),
    grid: TimeGrid = TimeGrid(1.0, 200),
    schedule: PenaltySchedule = PenaltySchedule(),
    strike: Optional[float] = None,
    backend=None,
) -> IdentityReport:
    """Three cases where a constraint should leave the price unchanged.

    1. American call, no short selling, against the unconstrained European call.
    2. American put, holdings restricted to be nonpositive, against the
       unconstrained American put.
    3. American put, no borrowing, against the unconstrained American put.
    """
    k = market.x0 if strike is None else strike
    run = lambda opt, cons: price(opt, market, cons, grid, schedule, backend)  # noqa: E731
    checks = []

    def add(name, a, b):
        gap = abs(a.price - b.price) / abs(b.price)
        checks.append(IdentityCheck(name, a.price, b.price, gap, a.converged and b.converged))

    call_c = run(OptionSpec("call", k, "american"), no_short_selling(market))
    call_eu = run(OptionSpec("call", k, "european"), None)
    add("call_no_short_selling", call_c, call_eu)
    put_free = run(OptionSpec("put", k, "american"), None)
    add("put_short_only", run(OptionSpec("put", k, "american"), short_only(market)), put_free)
    add("put_no_borrowing", run(OptionSpec("put", k, "american"), no_borrowing(market)), put_free)
    return IdentityReport(checks)
