"""Independent references: an exhaustive path-tree solver and Black-Scholes.

The tree solver deliberately shares no numerics with the engine.  It walks
every move history, solves each implicit step by bisection, and computes
takes the cheapest lift by trying every piece of the constraint set.  Agreement with the engine is
therefore evidence about the engine, not a restatement of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import (
    INF,
    ConfigError,
    ConstraintSpec,
    GeneratorSpec,
    InputError,
    MarketModel,
    ObstacleSpec,
    TerminalPayoff,
    TimeGrid,
)

MAX_ORACLE_N = 8


@dataclass
class OracleNode:
    y: float
    z: float
    dA: float
    dAbar: float
    dK: float


@dataclass
class OracleResult:
    N: int
    nodes: dict  # move history (tuple of 0/1, 1 = up) -> OracleNode

    @property
    def root(self) -> float:
        return self.nodes[()].y

    def tree_field(self, name: str = "y") -> np.ndarray:
        """Values in path-tree storage order (level by level, history read as binary)."""
        out = []
        for i in range(self.N + 1):
            for hist in product((0, 1), repeat=i):
                out.append(getattr(self.nodes[hist], name))
        return np.array(out)

    def collapse(self, name: str = "y", rtol: float = 1e-12) -> list[np.ndarray]:
        """Per-level arrays indexed by the number of up moves.

        Raises if two histories reaching the same recombined node disagree.
        """
        levels = []
        for i in range(self.N + 1):
            vals: dict[int, list] = {}
            for hist in product((0, 1), repeat=i):
                vals.setdefault(sum(hist), []).append(getattr(self.nodes[hist], name))
            row = np.empty(i + 1)
            for j in range(i + 1):
                v = vals[j]
                spread = max(v) - min(v)
                if spread > rtol * max(1.0, max(abs(a) for a in v)):
                    raise InputError(f"solution is path dependent at level {i}, node {j}")
                row[j] = v[0]
            levels.append(row)
        return levels

    def flat(self, name: str = "y") -> np.ndarray:
        return np.concatenate(self.collapse(name))


# --------------------------------------------------------------------------
# constraint geometry, written independently of core
# --------------------------------------------------------------------------


class _Vanished(Exception):
    """A piece of a value-dependent constraint set is empty at the probed value."""


def _scale(cons: ConstraintSpec, x: float) -> float:
    if cons.units == "z":
        return 1.0
    if cons.units == "amount":
        return cons.sigma
    return cons.sigma * x


def _piece(cons: ConstraintSpec, t: float, x: float, y: float, k: int) -> tuple[float, float]:
    """Piece ``k`` of the admissible set in z units at value ``y``."""
    s = _scale(cons, x)
    lo, hi = cons.intervals_at(t)[k]
    a, b = lo * s, hi * s
    if cons.wealth_bounds is not None:
        wa, wb = cons.wealth_bounds
        if wa != -INF:
            a = max(a, wa * cons.sigma * y)
        if wb != INF:
            b = min(b, wb * cons.sigma * y)
    if a > b:
        raise _Vanished
    return a, b


def _shift(z0: float, target: float, n: float, sqdt: float) -> tuple[float, float]:
    """Mean shift and lifted coefficient when closing part of the gap to ``target``."""
    d = abs(target - z0)
    if d == 0.0:
        return 0.0, z0
    frac = 1.0 if n == INF else min(1.0, n * sqdt * min(1.0, d) / d)
    if frac == 1.0:
        return sqdt * d, target
    return sqdt * frac * d, z0 + frac * (target - z0)


def _bisect(F, centre: float) -> float:
    w = 1.0 + abs(centre)
    lo, hi = centre - w, centre + w
    while F(lo) > 0:
        lo -= w
        w *= 2
    w = 1.0 + abs(centre)
    while F(hi) < 0:
        hi += w
        w *= 2
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if F(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# tree solver
# --------------------------------------------------------------------------


def brute_force_tree_solve(
    X,
    gen: GeneratorSpec,
    cons: ConstraintSpec | None,
    obstacle: ObstacleSpec | None,
    n_penalty: float,
    grid: TimeGrid,
    market: MarketModel,
    n_obs: float = INF,
) -> OracleResult:
    """Solve the penalized / reflected recursion on every path of a depth-``N`` tree.

    ``X`` is a ``TerminalPayoff`` (a function of the terminal stock level, or
    ``2**N`` values in binary history order).  ``n_penalty = inf`` and
    ``n_obs = inf`` select the exact constraint lift and exact projection.
    """
    N = grid.N
    if N > MAX_ORACLE_N:
        raise ConfigError(f"oracle limited to N <= {MAX_ORACLE_N}, got {N}")
    if cons is not None and cons.is_trivial:
        cons = None
    dt = grid.T / N
    sqdt = math.sqrt(dt)
    up_f = 1.0 + market.mu_drift * dt + market.sigma * sqdt
    dn_f = 1.0 + market.mu_drift * dt - market.sigma * sqdt

    stock = {(): market.x0}
    for i in range(N):
        for hist in product((0, 1), repeat=i):
            stock[hist + (1,)] = stock[hist] * up_f
            stock[hist + (0,)] = stock[hist] * dn_f

    kind = "none" if obstacle is None else obstacle.kind

    def barrier(hist):
        if kind == "none":
            return math.nan
        t = len(hist) * dt
        if obstacle.values is not None:
            i = len(hist)
            return float(obstacle.values[i * (i + 1) // 2 + sum(hist)])
        return float(obstacle.level(t, stock[hist]))

    terminal = list(product((0, 1), repeat=N))
    if X.values is not None:
        vals = [float(v) for v in np.asarray(X.values, dtype=float)]
        if len(vals) != len(terminal):
            raise InputError(f"path payoff needs {len(terminal)} values")
    else:
        vals = [float(X.fn(np.array([stock[h]]))[0]) for h in terminal]

    nodes = {}
    for h, v in zip(terminal, vals):
        nodes[h] = OracleNode(v, 0.0, 0.0, 0.0, 0.0)

    for i in range(N - 1, -1, -1):
        t = i * dt
        for hist in product((0, 1), repeat=i):
            vu = nodes[hist + (1,)].y
            vd = nodes[hist + (0,)].y
            e = (vu + vd) / 2.0
            z0 = (vu - vd) / (2.0 * sqdt)
            x = stock[hist]
            L = barrier(hist)

            npieces = 1 if cons is None else len(cons.intervals_at(t))

            def parts(y, k):
                if cons is None:
                    return 0.0, z0, float(gen(t, y, z0))
                a, b = _piece(cons, t, x, y, k)
                shift, ze = _shift(z0, min(max(z0, a), b), n_penalty, sqdt)
                return shift, ze, float(gen(t, y, ze))

            def smallest(residual, centre):
                """Smallest root over the pieces; ties (relative 1e-12) keep the smaller coefficient."""
                best = None
                for k in range(npieces):
                    try:
                        root = _bisect(lambda v, k=k: residual(v, k), centre)
                        ze = parts(root, k)[1]
                    except _Vanished:
                        continue
                    if best is None:
                        best = (root, ze)
                        continue
                    tol = 1e-12 * max(1.0, abs(best[0]))
                    if root < best[0] - tol or (abs(root - best[0]) <= tol and ze < best[1]):
                        best = (root, ze)
                if best is None:
                    raise ConfigError(f"empty constraint set at t={t}")
                return best[0]

            def F_free(y, k):
                shift, _, gv = parts(y, k)
                return y - e - shift - gv * dt

            ytil = smallest(F_free, e)
            pushed = (kind == "lower" and ytil < L) or (kind == "upper" and ytil > L)
            y = ytil
            pen = 0.0
            if pushed:
                if n_obs == INF:
                    y = L
                else:
                    sgn = 1.0 if kind == "lower" else -1.0

                    def F_pen(v, k):
                        return F_free(v, k) - sgn * n_obs * max(sgn * (L - v), 0.0) * dt

                    y = smallest(F_pen, ytil)
                    pen = n_obs * abs(L - y) * dt
            # the lift recorded at y is the cheapest one available there
            opts = []
            for k in range(npieces):
                try:
                    shift, ze, gv = parts(y, k)
                except _Vanished:
                    continue
                opts.append((e + shift + gv * dt, ze, shift))
            if not opts:
                raise ConfigError(f"empty constraint set at t={t}")
            lowest = min(o[0] for o in opts)
            tol = 1e-12 * max(1.0, abs(lowest))
            value, ze, shift = min((o for o in opts if o[0] <= lowest + tol), key=lambda o: o[1])
            if pushed and n_obs == INF:
                pen = abs(y - value)
            dA, dAbar, dK = shift, 0.0, 0.0
            if pushed and kind == "lower":
                dAbar = pen
            elif pushed and kind == "upper":
                net = shift - pen
                dA, dK = (net, 0.0) if net >= 0 else (0.0, -net)
            nodes[hist] = OracleNode(y, ze, dA, dAbar, dK)
    return OracleResult(N, nodes)


# --------------------------------------------------------------------------
# Black-Scholes
# --------------------------------------------------------------------------


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def black_scholes_call(x0: float, k: float, r: float, sigma: float, T: float) -> float:
    """European call under lognormal dynamics with constant rate and volatility."""
    if min(x0, k, sigma, T) <= 0 or r < 0:
        raise InputError("black_scholes_call needs positive x0, k, sigma, T and r >= 0")
    v = sigma * math.sqrt(T)
    d1 = (math.log(x0 / k) + (r + 0.5 * sigma * sigma) * T) / v
    d2 = d1 - v
    return x0 * norm_cdf(d1) - k * math.exp(-r * T) * norm_cdf(d2)


def black_scholes_put(x0: float, k: float, r: float, sigma: float, T: float) -> float:
    return black_scholes_call(x0, k, r, sigma, T) - x0 + k * math.exp(-r * T)
