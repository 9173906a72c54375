"""Backward solvers: plain, penalized, reflected, and constrained-reflected.

All solvers share one node rule (see ``_kernels``).  ``solve_constrained_reflected``
drives a penalty schedule to its limit and reports the root value at each level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    INF,
    ConfigError,
    ConstraintSpec,
    GeneratorSpec,
    InputError,
    NumericError,
    ObstacleSpec,
    TerminalPayoff,
)
from .lattice import Lattice, NodeField

MODES = ("obstacle_first", "constraint_first", "diagonal")


@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty weights and the stopping rule on the root value.

    ``mode`` names which penalty is replaced by its exact limit:

    * ``obstacle_first``: obstacle projected exactly, constraint weight swept;
    * ``constraint_first``: constraint lifted exactly, obstacle weight swept;
    * ``diagonal``: both weights swept together.
    """

    mode: str = "obstacle_first"
    levels: tuple = tuple(float(2**k) for k in range(15))
    stop_tol: float = 1e-6
    max_levels: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"schedule.mode must be one of {MODES}, got {self.mode!r}")
        lv = tuple(float(v) for v in self.levels)
        if not lv:
            raise ConfigError("schedule.levels must not be empty")
        if any(b <= a for a, b in zip(lv, lv[1:])) or lv[0] <= 0:
            raise ConfigError("schedule.levels must be positive and strictly increasing")
        object.__setattr__(self, "levels", lv)
        if not self.stop_tol > 0:
            raise ConfigError("schedule.stop_tol must be > 0")
        if self.max_levels is not None and self.max_levels < 1:
            raise ConfigError("schedule.max_levels must be >= 1")

    @staticmethod
    def powers_of_two(lo: int = 0, hi: int = 14, **kw) -> "PenaltySchedule":
        return PenaltySchedule(levels=tuple(float(2**k) for k in range(lo, hi + 1)), **kw)

    def with_mode(self, mode: str) -> "PenaltySchedule":
        return PenaltySchedule(mode, self.levels, self.stop_tol, self.max_levels)

    @property
    def active_levels(self) -> tuple:
        return self.levels if self.max_levels is None else self.levels[: self.max_levels]


@dataclass
class Diagnostics:
    skorokhod_residual: float = 0.0
    max_constraint_violation: float = 0.0
    fixed_point_iters_max: int = 0
    equation_residual: float = 0.0
    unsaturated_nodes: int = 0
    backend: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class SolveResult:
    """Node fields of one backward solve.

    ``z`` is the martingale coefficient after the constraint lift and ``zraw``
    the coefficient read off the successor values before it; they differ only
    where the constraint binds.
    """

    lattice: Lattice
    y: NodeField
    z: NodeField
    zraw: NodeField
    dA: NodeField
    dAbar: NodeField
    dK: NodeField
    obstacle_kind: str
    obstacle: np.ndarray
    diagnostics: Diagnostics
    n_penalty: float = 0.0
    n_obs: float = INF
    converged: bool = True

    @property
    def root(self) -> float:
        return self.y.root


# --------------------------------------------------------------------------
# single implicit step
# --------------------------------------------------------------------------


def implicit_step(
    e: float, z: float, t: float, gen: GeneratorSpec, extra_drift: float, dt: float
) -> float:
    """Solve ``y = e + (g(t, y, z) + extra_drift) dt`` by fixed-point iteration from ``e``."""
    if gen.lipschitz_mu * dt >= 1:
        raise ConfigError(f"contraction condition violated: lipschitz_mu*dt = {gen.lipschitz_mu * dt}")
    y = float(e)
    for _ in range(_kernels.MAX_ITERS):
        yn = float(e + (gen(t, y, z) + extra_drift) * dt)
        if abs(yn - y) <= _kernels.FP_TOL * max(1.0, abs(yn)):
            return yn
        y = yn
    raise NumericError(f"implicit step did not converge in {_kernels.MAX_ITERS} iterations")


# --------------------------------------------------------------------------
# kernel plumbing
# --------------------------------------------------------------------------


def _wealth_slope(cons: ConstraintSpec) -> float:
    a, b = cons.wealth_bounds
    w = max((abs(v) for v in (a, b) if math.isfinite(v)), default=0.0)
    return cons.sigma * w


def _check_setup(lat, gen, cons, obstacle_kind):
    lat.grid.check_contraction(gen.lipschitz_mu)
    if cons is not None and cons.depends_on_y:
        if obstacle_kind == "upper":
            raise ConfigError(
                "constraints that depend on y are not supported with an upper obstacle"
            )
        k = _wealth_slope(cons)
        rate = lat.sqdt * k + gen.lipschitz_mu * (1.0 + k) * lat.dt
        if rate >= 1.0:
            raise ConfigError(
                f"y-dependent constraint: implicit step is not a contraction "
                f"(rate {rate:.4g} >= 1); use a smaller dt"
            )


def _constraint_arrays(lat: Lattice, cons: Optional[ConstraintSpec]):
    N = lat.N
    if cons is None or cons.is_trivial:
        lo = np.full((N, 1), -INF)
        hi = np.full((N, 1), INF)
        return False, lo, hi, np.ones(lat.size), False, -INF, INF, 0.0
    rows = [cons.intervals_at(float(t)) for t in lat.grid.times[:N]]
    K = max(len(r) for r in rows)
    lo = np.full((N, K), INF)
    hi = np.full((N, K), -INF)
    for i, r in enumerate(rows):
        for k, (a, b) in enumerate(r):
            lo[i, k] = a
            hi[i, k] = b
    scale = np.broadcast_to(np.asarray(cons.scale(lat.x), dtype=float), (lat.size,)).copy()
    if cons.depends_on_y:
        wlo, whi = cons.wealth_bounds
        return True, lo, hi, scale, True, wlo, whi, float(cons.sigma)
    return True, lo, hi, scale, False, -INF, INF, 0.0


def _obstacle_arrays(lat: Lattice, obstacle: Optional[ObstacleSpec], terminal: np.ndarray):
    if obstacle is None or obstacle.kind == "none":
        return "none", _kernels.OBS_NONE, np.full(lat.size, np.nan)
    vals = obstacle.on_nodes(lat.t, lat.x)
    last = vals[lat.level(lat.N)]
    if obstacle.kind == "lower":
        bad = np.nonzero(terminal < last)[0]
        if bad.size:
            j = int(bad[0])
            raise InputError(
                f"terminal payoff below the lower obstacle at terminal node {j}: "
                f"{terminal[j]} < {last[j]}"
            )
        return "lower", _kernels.OBS_LOWER, vals
    bad = np.nonzero(terminal > last)[0]
    if bad.size:
        j = int(bad[0])
        raise InputError(
            f"terminal payoff above the upper obstacle at terminal node {j}: "
            f"{terminal[j]} > {last[j]}"
        )
    return "upper", _kernels.OBS_UPPER, vals


def _terminal_values(X, lat: Lattice) -> np.ndarray:
    if isinstance(X, TerminalPayoff):
        return X.on_terminal(lat.level_x(lat.N))
    if isinstance(X, NodeField):
        return np.array(X.level(lat.N), dtype=float)
    v = np.asarray(X, dtype=float)
    return TerminalPayoff(values=v).on_terminal(lat.level_x(lat.N))


def _solve(X, gen, cons, n_pen, obstacle, n_obs, lat, backend=None) -> SolveResult:
    if not n_pen >= 0:
        raise ConfigError(f"constraint penalty must be >= 0, got {n_pen}")
    if not n_obs >= 0:
        raise ConfigError(f"obstacle penalty must be >= 0, got {n_obs}")
    terminal = _terminal_values(X, lat)
    kind, obs_code, obs = _obstacle_arrays(lat, obstacle, terminal)
    use_cons, lo, hi, scale, has_w, wlo, whi, wsig = _constraint_arrays(lat, cons)
    _check_setup(lat, gen, cons if use_cons else None, kind)
    inp = _kernels.KernelInputs(
        x=lat.x, t=lat.t, offsets=lat.offsets, up=lat.up, down=lat.down, N=lat.N,
        dt=lat.dt, terminal=terminal, driver=gen.driver, params=gen.params,
        use_cons=use_cons, lo=lo, hi=hi, scale=scale, has_w=has_w, wlo=float(wlo),
        whi=float(whi), wsig=wsig, n_pen=float(n_pen), obs_kind=obs_code, obs=obs,
        n_obs=float(n_obs),
    )
    backend = backend or _kernels.default_backend()
    out = _kernels.run_backward(inp, backend)
    used = "numba" if (backend == "numba" and _kernels.HAVE_NUMBA and gen.params is not None) else "numpy"

    f = lambda v: NodeField(lat, v)  # noqa: E731
    res = SolveResult(
        lattice=lat, y=f(out.y), z=f(out.z), zraw=f(out.zraw), dA=f(out.dA),
        dAbar=f(out.dAbar), dK=f(out.dK), obstacle_kind=kind, obstacle=obs,
        diagnostics=Diagnostics(
            max_constraint_violation=out.max_violation,
            fixed_point_iters_max=out.iters_max,
            unsaturated_nodes=out.n_unsaturated,
            backend=used,
        ),
        n_penalty=float(n_pen), n_obs=float(n_obs),
    )
    res.diagnostics.skorokhod_residual = skorokhod_residual(res)
    res.diagnostics.equation_residual = float(np.max(np.abs(equation_residual(res, gen)), initial=0.0))
    return res


def equation_residual(res: SolveResult, gen: GeneratorSpec) -> np.ndarray:
    """``y_i - (E_i[y_{i+1}] + g(t_i, y_i, z_i) dt + dA + dAbar - dK)`` at non-terminal nodes."""
    lat = res.lattice
    n = int(lat.offsets[lat.N])
    y = res.y.values
    e = 0.5 * (y[lat.up[:n]] + y[lat.down[:n]])
    out = np.empty(n)
    for i in range(lat.N):
        s = lat.level(i)
        out[s] = y[s] - (
            e[s]
            + gen(float(lat.grid.times[i]), y[s], res.z.values[s]) * lat.dt
            + res.dA.values[s]
            + res.dAbar.values[s]
            - res.dK.values[s]
        )
    return out


def skorokhod_residual(res: SolveResult) -> float:
    """Sum over nodes of the obstacle gap times the obstacle increment."""
    if res.obstacle_kind == "none":
        return 0.0
    n = int(res.lattice.offsets[res.lattice.N])
    ob = res.obstacle[:n]
    y = res.y.values[:n]
    if res.obstacle_kind == "lower":
        inc = res.dAbar.values[:n]
        gap = y - ob
    else:
        inc = res.dK.values[:n]
        gap = ob - y
    act = inc != 0
    return float(np.sum(gap[act] * inc[act]))


def obstacle_violation(res: SolveResult) -> float:
    if res.obstacle_kind == "none":
        return 0.0
    y, ob = res.y.values, res.obstacle
    with np.errstate(invalid="ignore"):
        gap = ob - y if res.obstacle_kind == "lower" else y - ob
    gap = gap[np.isfinite(gap)]
    return float(max(0.0, gap.max(initial=0.0)))


# --------------------------------------------------------------------------
# public solvers
# --------------------------------------------------------------------------


def solve_plain(X, gen: GeneratorSpec, lat: Lattice, backend=None) -> SolveResult:
    """Unconstrained, unreflected backward induction."""
    return _solve(X, gen, None, 0.0, None, INF, lat, backend)


def solve_penalized(
    X, gen: GeneratorSpec, cons: Optional[ConstraintSpec], n: float,
    obstacle: Optional[ObstacleSpec], n_obs: float, lat: Lattice, backend=None,
) -> SolveResult:
    """Constraint penalty ``n`` (``inf`` = exact lift) and obstacle penalty ``n_obs`` (``inf`` = projection)."""
    return _solve(X, gen, cons, n, obstacle, n_obs, lat, backend)


def solve_reflected(X, gen: GeneratorSpec, obstacle: ObstacleSpec, lat: Lattice, backend=None) -> SolveResult:
    """Reflection off a lower or upper obstacle by exact projection."""
    return _solve(X, gen, None, 0.0, obstacle, INF, lat, backend)


@dataclass
class ConvergenceRow:
    penalty_level: float
    root_value: float
    max_violation: float
    converged: bool


@dataclass
class ConvergenceReport:
    mode: str
    stop_tol: float
    rows: list = field(default_factory=list)
    converged: bool = False
    iterates: Optional[list] = None

    @property
    def roots(self) -> np.ndarray:
        return np.array([r.root_value for r in self.rows])

    def is_monotone(self, slack: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.roots) >= -slack))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "stop_tol": self.stop_tol,
            "converged": self.converged,
            "rows": [dict(r.__dict__) for r in self.rows],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["penalty_level", "root_value", "max_violation", "converged"])
            for r in self.rows:
                w.writerow([repr(r.penalty_level), repr(r.root_value), repr(r.max_violation),
                            "true" if r.converged else "false"])


def _penalties(mode: str, n: float, has_obstacle: bool) -> tuple[float, float]:
    if mode == "obstacle_first":
        return n, INF
    if mode == "constraint_first":
        return INF, (n if has_obstacle else INF)
    return n, (n if has_obstacle else INF)


def solve_constrained_reflected(
    X, gen: GeneratorSpec, cons: Optional[ConstraintSpec], obstacle: Optional[ObstacleSpec],
    schedule: PenaltySchedule, lat: Lattice, keep_iterates: bool = False, backend=None,
) -> tuple[SolveResult, ConvergenceReport]:
    """Run the schedule until the root value settles and the constraint is met.

    Level 0 of the report is the zero-penalty baseline.  A level counts as
    converged when the root moved by at most ``stop_tol`` from the previous
    level and every swept constraint penalty has saturated (no node left with
    an inadmissible coefficient).  Exhausting the schedule returns the last
    iterate with ``converged = False``.
    """
    has_obs = obstacle is not None and obstacle.kind != "none"
    mode = schedule.mode
    rep = ConvergenceReport(mode=mode, stop_tol=schedule.stop_tol, iterates=[] if keep_iterates else None)
    exact_only = mode == "constraint_first" and not has_obs

    def record(res, level, ok):
        viol = max(res.diagnostics.max_constraint_violation, obstacle_violation(res))
        rep.rows.append(ConvergenceRow(float(level), res.root, viol, ok))
        if keep_iterates:
            rep.iterates.append(res.y.values.copy())

    if exact_only:
        res = _solve(X, gen, cons, INF, obstacle, INF, lat, backend)
        record(res, INF, True)
        rep.converged = True
        return res, rep

    n_pen0, n_obs0 = _penalties(mode, 0.0, has_obs)
    prev = _solve(X, gen, cons, n_pen0, obstacle, n_obs0, lat, backend)
    record(prev, 0.0, False)
    res = prev
    for n in schedule.active_levels:
        n_pen, n_obs = _penalties(mode, n, has_obs)
        res = _solve(X, gen, cons, n_pen, obstacle, n_obs, lat, backend)
        settled = abs(res.root - prev.root) <= schedule.stop_tol
        exact_cons = res.diagnostics.unsaturated_nodes == 0
        ok = settled and exact_cons
        record(res, n, ok)
        if ok:
            rep.converged = True
            break
        prev = res
    res.converged = rep.converged
    return res, rep


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


@dataclass
class ComparisonVerdict:
    a_le_b: bool
    b_le_a: bool
    max_excess: float
    witness: Optional[tuple]
    increments_ordered: Optional[bool] = None

    @property
    def ordered(self) -> bool:
        return self.a_le_b

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _witness(lat: Lattice, flat: int) -> tuple:
    i = int(np.searchsorted(lat.offsets, flat, side="right") - 1)
    return i, int(flat - lat.offsets[i])


def compare_solutions(a: SolveResult, b: SolveResult, slack: float = 1e-10) -> ComparisonVerdict:
    """Nodewise order of two solutions on the same lattice.

    ``increments_ordered`` (reflected pairs only) reports whether the obstacle
    increments of ``a`` are dominated by those of ``b`` at every node.  It is
    informational: larger data can raise or lower the push needed at a node.
    """
    if not a.lattice.same_shape(b.lattice):
        raise InputError("compare_solutions needs both results on the same lattice")
    diff = a.y.values - b.y.values
    k = int(np.argmax(diff))
    inc = None
    if a.obstacle_kind != "none" and a.obstacle_kind == b.obstacle_kind:
        fa = a.dAbar if a.obstacle_kind == "lower" else a.dK
        fb = b.dAbar if b.obstacle_kind == "lower" else b.dK
        inc = bool(np.all(fa.values <= fb.values + slack))
    return ComparisonVerdict(
        a_le_b=bool(diff.max() <= slack),
        b_le_a=bool((-diff).max() <= slack),
        max_excess=float(diff.max()),
        witness=_witness(a.lattice, k) if diff.max() > slack else None,
        increments_ordered=inc,
    )
