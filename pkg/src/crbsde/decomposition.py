"""Doob-Meyer type decompositions for constrained super- and submartingales.

A candidate process ``Y`` is a constrained supermartingale exactly when the
smallest constrained supersolution with terminal ``Y_N`` and lower obstacle
``Y`` is ``Y`` itself; the solve then hands back the martingale coefficient
and the increasing part.  Submartingales use ``Y`` as an upper obstacle and
recover the compensator ``K`` from the downward pushes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConstraintSpec, GeneratorSpec, InputError, ObstacleSpec, TerminalPayoff
from .lattice import Lattice, NodeField
from .solver import PenaltySchedule, SolveResult, solve_constrained_reflected


def _node(lat: Lattice, flat: int) -> dict:
    i = int(np.searchsorted(lat.offsets, flat, side="right") - 1)
    return {"level": i, "node": int(flat - lat.offsets[i])}


def _as_values(Y, lat: Lattice) -> np.ndarray:
    v = Y.values if isinstance(Y, NodeField) else np.asarray(Y, dtype=float)
    if v.shape != (lat.size,):
        raise InputError(f"process has {v.size} values, lattice has {lat.size} nodes")
    if not np.all(np.isfinite(v)):
        raise InputError("process must be finite at every node")
    return np.array(v, dtype=float)


@dataclass
class SupermartingaleDecomposition:
    is_decomposable: bool
    max_gap: float
    witness: Optional[dict]
    A: NodeField  # increasing-part increments
    z: NodeField
    first_failing_level: Optional[float]
    converged: bool
    result: SolveResult

    def to_dict(self) -> dict:
        return {
            "is_decomposable": self.is_decomposable,
            "max_gap": self.max_gap,
            "witness": self.witness,
            "first_failing_level": self.first_failing_level,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def decompose_supermartingale(
    Y, gen: GeneratorSpec, cons: Optional[ConstraintSpec], lat: Lattice,
    schedule: PenaltySchedule = PenaltySchedule(),
) -> SupermartingaleDecomposition:
    """Decompose ``Y`` as a constrained supersolution, if it is one.

    The check runs at every schedule level: ``Y`` must reproduce itself under
    each penalized driver, and ``first_failing_level`` names the first weight
    at which it does not (None when all pass).
    """
    yv = _as_values(Y, lat)
    slack = 2.0 * schedule.stop_tol
    obstacle = ObstacleSpec("lower", values=yv)
    X = TerminalPayoff(values=yv[lat.level(lat.N)].copy())
    res, rep = solve_constrained_reflected(X, gen, cons, obstacle, schedule, lat, keep_iterates=True)
    first = None
    for row, it in zip(rep.rows, rep.iterates):
        if np.max(np.abs(it - yv)) > slack:
            first = row.penalty_level
            break
    gap = np.abs(res.y.values - yv)
    k = int(np.argmax(gap))
    ok = bool(gap[k] <= slack and res.converged)
    A = NodeField(lat, res.dA.values + res.dAbar.values)
    return SupermartingaleDecomposition(
        ok, float(gap[k]), None if gap[k] <= slack else _node(lat, k), A, res.z, first,
        res.converged, res,
    )


@dataclass
class SubmartingaleDecomposition:
    is_decomposable: bool
    max_gap: float
    witness: Optional[dict]
    K: NodeField  # accumulated compensator; NaN where it depends on the path
    dK: NodeField
    A: NodeField
    z: NodeField
    shifted_residual: float
    off_contact_push: float
    converged: bool
    result: SolveResult

    def to_dict(self) -> dict:
        return {
            "is_decomposable": self.is_decomposable,
            "max_gap": self.max_gap,
            "witness": self.witness,
            "shifted_residual": self.shifted_residual,
            "off_contact_push": self.off_contact_push,
            "K_terminal_max": float(np.nanmax(self.K.level(self.K.lattice.N))),
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _check_sub_hypotheses(gen: GeneratorSpec, cons: Optional[ConstraintSpec]) -> None:
    if cons is not None and cons.depends_on_y:
        raise InputError("submartingale decomposition needs a constraint on z alone (no y dependence)")
    if cons is not None and not cons.contains_zero():
        raise InputError("submartingale decomposition needs 0 in the constraint set")
    z_only = "z_only" in gen.traits and "zero_at_zero_z" in gen.traits
    affine_y = gen.params is not None and gen.params[2] == 0.0 and gen.params[4] == 0.0
    if not (z_only or affine_y):
        raise InputError(
            "submartingale decomposition needs g(t, z) with g(t, 0) = 0, "
            "or g = g1(t, z) + a*y with g1(t, 0) = 0"
        )


def accumulate(lat: Lattice, inc: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Forward sums ``K_{i+1} = K_i + inc_i`` along paths.

    On a recombining lattice a node reached with different sums gets NaN.
    """
    K = np.zeros(lat.size)
    for i in range(lat.N):
        s = lat.level(i)
        nxt = lat.level(i + 1)
        m = lat.level_size(i + 1)
        via_up, via_down = np.full(m, np.nan), np.full(m, np.nan)
        has_up, has_down = np.zeros(m, bool), np.zeros(m, bool)
        vals = K[s] + inc[s]
        via_up[lat.up[s] - lat.offsets[i + 1]] = vals
        via_down[lat.down[s] - lat.offsets[i + 1]] = vals
        has_up[lat.up[s] - lat.offsets[i + 1]] = True
        has_down[lat.down[s] - lat.offsets[i + 1]] = True
        # a NaN parent must stay NaN, so select by arrival, not by finiteness
        out = np.where(has_up, via_up, via_down)
        both = has_up & has_down
        scale = np.maximum(1.0, np.abs(out))
        clash = both & ~(np.abs(via_up - via_down) <= rtol * scale)
        out = np.where(clash, np.nan, out)
        K[nxt] = out
    return K


def decompose_submartingale(
    Y, gen: GeneratorSpec, cons: Optional[ConstraintSpec], lat: Lattice,
    schedule: PenaltySchedule = PenaltySchedule(),
) -> SubmartingaleDecomposition:
    """Recover the compensator ``K`` of a constrained submartingale ``Y``.

    Also verifies that ``Y - K`` solves the equation with the shifted driver
    ``g(t, y + K_t, z)`` at every node where ``K`` is path independent.
    """
    _check_sub_hypotheses(gen, cons)
    yv = _as_values(Y, lat)
    slack = 2.0 * schedule.stop_tol
    obstacle = ObstacleSpec("upper", values=yv)
    X = TerminalPayoff(values=yv[lat.level(lat.N)].copy())
    res, _ = solve_constrained_reflected(X, gen, cons, obstacle, schedule, lat)
    gap = np.abs(res.y.values - yv)
    k = int(np.argmax(gap))
    ok = bool(gap[k] <= slack and res.converged)

    dK = res.dK.values
    K = accumulate(lat, dK)
    off = gap > slack
    off_push = float(dK[off].max(initial=0.0))

    # shifted equation for Y - K at nodes where K and the children's K are known
    Yt = res.y.values - K
    worst = 0.0
    for i in range(lat.N):
        s = lat.level(i)
        u, d = lat.up[s], lat.down[s]
        e = 0.5 * (Yt[u] + Yt[d])
        Ki = K[s]
        g = gen(float(lat.grid.times[i]), Yt[s] + Ki, res.z.values[s])
        r = Yt[s] - (e + g * lat.dt + res.dA.values[s] + res.dAbar.values[s])
        r = r[np.isfinite(r)]
        if r.size:
            worst = max(worst, float(np.abs(r).max()))
    return SubmartingaleDecomposition(
        ok, float(gap[k]), None if gap[k] <= slack else _node(lat, k),
        NodeField(lat, K), res.dK, res.dA, res.z, worst, off_push, res.converged, res,
    )
