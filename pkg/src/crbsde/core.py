"""Shared domain types: time grids, drivers, constraint sets, obstacles, payoffs.

Everything here is an immutable value object. Solvers read these specs and
never mutate them, so a spec can be shared freely between concurrent solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

INF = math.inf


class ConfigError(ValueError):
    """An instance is ill-posed (empty constraint set, bad grid, ...)."""


class InputError(ValueError):
    """Data handed to a solver violates a stated precondition."""


class NumericError(RuntimeError):
    """An iteration that must converge did not."""


# --------------------------------------------------------------------------
# grid and market
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"grid.T must be a positive finite number, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"grid.N must be an integer >= 1, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def check_contraction(self, mu: float) -> None:
        """Raise unless ``mu * dt < 1`` (the implicit step is then a contraction)."""
        if mu * self.dt >= 1.0:
            max_dt = 1.0 / mu
            raise ConfigError(
                f"contraction condition violated: lipschitz_mu*dt = {mu * self.dt:.6g} >= 1; "
                f"max admissible dt is < {max_dt:.6g} (N > {self.T / max_dt:.6g})"
            )


@dataclass(frozen=True)
class MarketModel:
    """Constant-coefficient stock ``dX = mu_drift X dt + sigma X dB`` and rate ``r``."""

    x0: float = 100.0
    mu_drift: float = 0.08
    sigma: float = 0.2
    r: float = 0.05

    def __post_init__(self):
        if not self.x0 > 0:
            raise ConfigError(f"market.x0 must be > 0, got {self.x0}")
        if not self.sigma >= 0:
            raise ConfigError(f"market.sigma must be >= 0, got {self.sigma}")
        if not self.r >= 0:
            raise ConfigError(f"market.r must be >= 0, got {self.r}")

    def require_elliptic(self) -> None:
        if not self.sigma > 0:
            raise ConfigError("market.sigma must be > 0 for hedging and the wealth driver")

    def max_positive_dt(self) -> float:
        """Largest dt with ``1 + mu*dt - sigma*sqrt(dt) > 0`` holding on (0, dt)."""
        mu, sig = self.mu_drift, self.sigma
        if sig == 0:
            return INF if mu >= 0 else -1.0 / mu
        # smallest positive root s of mu s^2 - sigma s + 1 = 0, with s = sqrt(dt)
        if mu == 0:
            s = 1.0 / sig
        else:
            disc = sig * sig - 4.0 * mu
            if disc < 0:
                return INF
            s = (sig - math.sqrt(disc)) / (2.0 * mu)
            if s <= 0:
                s = (sig + math.sqrt(disc)) / (2.0 * mu)
        return s * s


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

# parametric family, evaluated by both backends:
#   g = a_y*y + a_z*z + c_y*|y| + c_z*min(|z|, z_cap) + k0
_PARAM_KEYS = ("a_y", "a_z", "c_y", "c_z", "k0", "z_cap")


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver ``g(t, y, z)`` of the backward equation.

    ``driver`` must accept numpy arrays for ``y`` and ``z`` (``t`` is a float).
    ``params`` is set for the parametric family and lets the compiled backend
    evaluate ``g`` without calling back into Python.  ``traits`` declares
    structural facts (``z_only``, ``homogeneous``, ``convex``, ...) that the
    property suites use to decide which checks apply.
    """

    driver: Callable
    lipschitz_mu: float
    depends_on_y: bool = True
    is_linear_wealth: bool = False
    wealth: Optional[tuple] = None  # (r, mu_drift, sigma)
    params: Optional[tuple] = None
    traits: frozenset = frozenset()
    name: str = "custom"

    def __post_init__(self):
        if not (self.lipschitz_mu >= 0 and math.isfinite(self.lipschitz_mu)):
            raise ConfigError(f"lipschitz_mu must be finite and >= 0, got {self.lipschitz_mu}")
        if self.is_linear_wealth:
            if self.wealth is None or not self.wealth[2] > 0:
                raise ConfigError("linear wealth driver needs sigma > 0")

    def __call__(self, t, y, z):
        return self.driver(t, y, z)

    @property
    def y_coeff(self) -> Optional[float]:
        """The ``a`` of ``g = g1(z) + a*y`` when the driver has that form, else None."""
        if self.params is None:
            return None
        a_y, _, c_y, _, _, _ = self.params
        return a_y if c_y == 0 else None

    @staticmethod
    def parametric(a_y=0.0, a_z=0.0, c_y=0.0, c_z=0.0, k0=0.0, z_cap=INF, name=None):
        """``g = a_y y + a_z z + c_y |y| + c_z min(|z|, z_cap) + k0``."""
        vals = tuple(float(v) for v in (a_y, a_z, c_y, c_z, k0, z_cap))
        a_y, a_z, c_y, c_z, k0, z_cap = vals
        if not z_cap > 0:
            raise ConfigError("z_cap must be > 0")

        def g(t, y, z):
            return a_y * y + a_z * z + c_y * np.abs(y) + c_z * np.minimum(np.abs(z), z_cap) + k0

        mu = max(abs(a_y) + abs(c_y), abs(a_z) + abs(c_z))
        traits = set()
        if a_y == 0 and c_y == 0:
            traits.add("z_only")
        if a_y == 0 and c_y == 0 and k0 == 0:
            traits.add("zero_at_zero_z")
        if k0 == 0 and math.isinf(z_cap):
            traits.add("homogeneous")
        if c_y >= 0 and c_z >= 0 and math.isinf(z_cap):
            traits.add("convex")
        if a_z == 0 and (c_z == 0 or math.isfinite(z_cap)):
            traits.add("z_part_bounded")
        return GeneratorSpec(
            driver=g,
            lipschitz_mu=mu,
            depends_on_y=not (a_y == 0 and c_y == 0),
            params=vals,
            traits=frozenset(traits),
            name=name or "parametric",
        )

    @staticmethod
    def zero():
        return GeneratorSpec.parametric(name="zero")

    @staticmethod
    def linear_wealth(r: float, mu_drift: float, sigma: float):
        """Self-financing wealth driver ``g = -r y - ((mu_drift - r)/sigma) z``."""
        if not sigma > 0:
            raise ConfigError("linear wealth driver needs sigma > 0")
        theta = (mu_drift - r) / sigma
        base = GeneratorSpec.parametric(a_y=-r, a_z=-theta, name="linear_wealth")
        return GeneratorSpec(
            driver=base.driver,
            lipschitz_mu=base.lipschitz_mu,
            depends_on_y=r != 0,
            is_linear_wealth=True,
            wealth=(float(r), float(mu_drift), float(sigma)),
            params=base.params,
            traits=base.traits,
            name="linear_wealth",
        )


# --------------------------------------------------------------------------
# constraints
# --------------------------------------------------------------------------

_UNITS = ("z", "shares", "amount")


def _norm_intervals(intervals) -> tuple:
    out = []
    for pair in intervals:
        lo, hi = pair
        lo = -INF if lo is None else float(lo)
        hi = INF if hi is None else float(hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ConfigError("constraint interval endpoints must not be NaN")
        if lo > hi:
            raise ConfigError(f"constraint interval [{lo}, {hi}] is empty")
        out.append((lo, hi))
    if not out:
        raise ConfigError("constraint set is empty (no intervals)")
    return tuple(sorted(out))


@dataclass(frozen=True)
class ConstraintSpec:
    """A closed set of admissible martingale coefficients per time step.

    The set is a finite union of closed intervals, given in one of three units:

    * ``"z"``: directly on the martingale coefficient;
    * ``"amount"``: on the money held in stock, ``z = sigma * amount``;
    * ``"shares"``: on the portfolio weight per unit stock price, ``z = sigma * X * pi``.

    ``wealth_bounds = (a, b)`` further restricts the amount in stock to
    ``[a*y, b*y]`` (infinite entries mean no bound on that side), which makes the
    set depend on the current value ``y``.  ``by_time`` optionally overrides the
    intervals at given grid times.
    """

    intervals: tuple = ((-INF, INF),)
    units: str = "z"
    sigma: Optional[float] = None
    wealth_bounds: Optional[tuple] = None
    by_time: Optional[Callable[[float], Sequence]] = None

    def __post_init__(self):
        object.__setattr__(self, "intervals", _norm_intervals(self.intervals))
        if self.units not in _UNITS:
            raise ConfigError(f"constraint.units must be one of {_UNITS}, got {self.units!r}")
        if self.units != "z" or self.wealth_bounds is not None:
            if self.sigma is None or not self.sigma > 0:
                raise ConfigError("constraint in portfolio units needs sigma > 0")
        if self.wealth_bounds is not None:
            a, b = self.wealth_bounds
            a = -INF if a is None else float(a)
            b = INF if b is None else float(b)
            if a > b:
                raise ConfigError(f"wealth_bounds ({a}, {b}) are empty")
            object.__setattr__(self, "wealth_bounds", (a, b))

    # -- structure ---------------------------------------------------------

    @staticmethod
    def whole_line():
        return ConstraintSpec()

    @property
    def depends_on_y(self) -> bool:
        return self.wealth_bounds is not None

    @property
    def is_trivial(self) -> bool:
        return (
            self.by_time is None
            and self.wealth_bounds is None
            and self.intervals == ((-INF, INF),)
        )

    @property
    def needs_state(self) -> bool:
        return self.units == "shares"

    def intervals_at(self, t: float) -> tuple:
        if self.by_time is None:
            return self.intervals
        return _norm_intervals(self.by_time(t))

    def is_cone(self) -> bool:
        ends = {e for iv in self.intervals for e in iv}
        return self.by_time is None and ends <= {0.0, INF, -INF}

    def is_convex(self) -> bool:
        return self.by_time is None and len(_merge(self.intervals)) == 1

    def contains_zero(self) -> bool:
        return any(lo <= 0.0 <= hi for lo, hi in self.intervals)

    # -- geometry ------------------------------------------------------------

    def scale(self, x=None):
        """Factor mapping constraint units to z units (scalar or array)."""
        if self.units == "z":
            return 1.0
        if self.units == "amount":
            return self.sigma
        if x is None:
            raise ConfigError("constraint in 'shares' units needs the stock level x")
        return self.sigma * np.asarray(x, dtype=float)

    def z_bounds(self, t: float, x=None, y=None) -> np.ndarray:
        """Return an (M, 2) array of z-space intervals at one state (empty rows removed)."""
        s = float(self.scale(x))
        rows = []
        wl, wh = -INF, INF
        if self.wealth_bounds is not None:
            if y is None:
                raise ConfigError("constraint with wealth bounds needs the value y")
            wl, wh = _wealth_z_bounds(self.wealth_bounds, self.sigma, float(y))
        for lo, hi in self.intervals_at(t):
            a = max(lo * s, wl)
            b = min(hi * s, wh)
            if a <= b:
                rows.append((a, b))
        if not rows:
            raise ConfigError(f"constraint set is empty at t={t}")
        return np.array(rows)


def _merge(intervals) -> list:
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def _wealth_z_bounds(bounds, sigma, y):
    a, b = bounds
    lo = -INF if math.isinf(a) else a * sigma * y
    hi = INF if math.isinf(b) else b * sigma * y
    return lo, hi


def _nearest(z: float, rows: np.ndarray) -> tuple:
    best, dist = math.nan, INF
    for a, b in rows:
        c = min(max(z, a), b)
        d = abs(z - c)
        if d < dist or (d == dist and c < best):
            best, dist = c, d
    return best, dist


def project_to_constraint(spec: ConstraintSpec, t: float, z: float, x=None, y=None) -> float:
    """Nearest admissible point; equidistant candidates resolve to the smaller one."""
    return _nearest(float(z), spec.z_bounds(t, x, y))[0]


def distance_to_constraint(spec: ConstraintSpec, t: float, z: float, x=None, y=None) -> float:
    """Distance from ``z`` to the admissible set, capped at 1."""
    return min(1.0, _nearest(float(z), spec.z_bounds(t, x, y))[1])


# --------------------------------------------------------------------------
# obstacles and payoffs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObstacleSpec:
    """Lower or upper barrier ``level(t, x)`` (vectorised), or explicit node values.

    ``values`` takes precedence and must be a flat array over all lattice nodes.
    Use ``-inf`` (lower) or ``+inf`` (upper) where the barrier is absent.
    """

    kind: str = "none"
    level: Optional[Callable] = None
    values: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("none", "lower", "upper"):
            raise ConfigError(f"obstacle.kind must be none|lower|upper, got {self.kind!r}")
        if self.kind != "none" and self.level is None and self.values is None:
            raise ConfigError("obstacle needs a level function or node values")

    @staticmethod
    def none():
        return ObstacleSpec()

    @staticmethod
    def lower(level: Callable):
        return ObstacleSpec("lower", level)

    @staticmethod
    def upper(level: Callable):
        return ObstacleSpec("upper", level)

    def on_nodes(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.full(x.shape, np.nan)
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.shape != x.shape:
                raise InputError(f"obstacle has {v.size} node values, lattice has {x.size}")
            return v
        v = np.broadcast_to(np.asarray(self.level(t, x), dtype=float), x.shape).copy()
        if np.isnan(v).any():
            raise InputError("obstacle evaluates to NaN")
        return v


@dataclass(frozen=True)
class TerminalPayoff:
    """Terminal data: a function of the terminal stock level, or raw terminal node values."""

    fn: Optional[Callable] = None
    values: Optional[np.ndarray] = field(default=None, compare=False)
    name: str = "payoff"

    def __post_init__(self):
        if (self.fn is None) == (self.values is None):
            raise ConfigError("TerminalPayoff needs exactly one of fn or values")

    @staticmethod
    def constant(c: float):
        return TerminalPayoff(lambda x: np.full(np.shape(x), float(c)), name=f"const({c})")

    @staticmethod
    def call(k: float):
        return TerminalPayoff(lambda x: np.maximum(x - k, 0.0), name=f"call({k})")

    @staticmethod
    def put(k: float):
        return TerminalPayoff(lambda x: np.maximum(k - x, 0.0), name=f"put({k})")

    @staticmethod
    def stock():
        return TerminalPayoff(lambda x: np.asarray(x, dtype=float), name="stock")

    def on_terminal(self, x_terminal: np.ndarray) -> np.ndarray:
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.shape != x_terminal.shape:
                raise InputError(
                    f"payoff has {v.size} terminal values, lattice has {x_terminal.size}"
                )
        else:
            v = np.broadcast_to(np.asarray(self.fn(x_terminal), dtype=float), x_terminal.shape)
        if not np.all(np.isfinite(v)):
            raise InputError("terminal payoff has non-finite values")
        return np.array(v, dtype=float)
