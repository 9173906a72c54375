"""Backward-induction kernels.

One node update, shared by every solver:

1. ``e = (v_up + v_down)/2`` and ``z0 = (v_up - v_down)/(2 sqrt(dt))``.
2. Constraint lift toward an admissible target ``c`` at distance ``d = |c - z0|``.
   A fraction ``phi = min(1, n sqrt(dt) min(1, d)/d)`` of the gap is closed by
   raising the child on the side of ``c``; this moves the martingale
   coefficient to ``z0 + phi (c - z0)`` and adds
   ``dA = sqrt(dt) phi d = min(sqrt(dt) d, n min(1, d) dt)`` to the mean.
   Below saturation that is the penalty ``n d dt``; at saturation the
   coefficient is admissible.  ``n = inf`` means full lift.
3. Implicit step ``y = e + dA + g(t, y, z) dt`` by fixed-point iteration.
4. The value is the minimum over targets.  On each side of ``z0`` only the
   nearest admissible point can attain it, so two solves suffice (one when
   the set is an interval).  Equal values within ``TIE_RTOL`` go to the
   smaller target.
5. Obstacle: exact projection (``n_obs = inf``) or penalty ``n_obs (L - y)^+``.

Two implementations follow: a numba kernel for the parametric driver family
and a level-vectorised numpy version that accepts any vectorised driver.
``CRBSDE_BACKEND=numpy`` forces the latter.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, NumericError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


MAX_ITERS = 100
FP_TOL = 1e-13
TIE_RTOL = 1e-12

OBS_NONE, OBS_LOWER, OBS_UPPER = 0, 1, 2


def default_backend() -> str:
    env = os.environ.get("CRBSDE_BACKEND", "").strip().lower()
    if env in ("numpy", "numba"):
        if env == "numba" and not HAVE_NUMBA:
            return "numpy"
        return env
    return "numba" if HAVE_NUMBA else "numpy"


@dataclass
class KernelInputs:
    x: np.ndarray
    t: np.ndarray
    offsets: np.ndarray
    up: np.ndarray
    down: np.ndarray
    N: int
    dt: float
    terminal: np.ndarray
    driver: object  # vectorised g(t, y, z)
    params: object  # 6-tuple or None
    use_cons: bool
    lo: np.ndarray  # (N, K) interval lower ends in constraint units
    hi: np.ndarray
    scale: np.ndarray  # per node factor to z units
    has_w: bool
    wlo: float
    whi: float
    wsig: float
    n_pen: float
    obs_kind: int
    obs: np.ndarray
    n_obs: float


@dataclass
class KernelOutputs:
    y: np.ndarray
    z: np.ndarray
    zraw: np.ndarray
    dA: np.ndarray
    dAbar: np.ndarray
    dK: np.ndarray
    iters_max: int
    max_violation: float
    n_unsaturated: int


# --------------------------------------------------------------------------
# compiled scalar kernel
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _g(gp, y, z):
    return gp[0] * y + gp[1] * z + gp[2] * abs(y) + gp[3] * min(abs(z), gp[5]) + gp[4]


@njit(cache=True, nogil=True)
def _wealth(has_w, wlo, whi, wsig, y):
    wl = -np.inf
    wh = np.inf
    if has_w:
        if not math.isinf(wlo):
            wl = wlo * wsig * y
        if not math.isinf(whi):
            wh = whi * wsig * y
    return wl, wh


@njit(cache=True, nogil=True)
def _side_target(z0, lo, hi, s, wl, wh, side):
    """Nearest admissible point at or below (side < 0) or above (side > 0) ``z0``; NaN if none."""
    best = np.nan
    for k in range(lo.shape[0]):
        a = max(lo[k] * s, wl)
        b = min(hi[k] * s, wh)
        if a > b:
            continue
        if side < 0:
            if a <= z0:
                c = min(b, z0)
                if best != best or c > best:
                    best = c
        elif b >= z0:
            c = max(a, z0)
            if best != best or c < best:
                best = c
    return best


@njit(cache=True, nogil=True)
def _partial(z0, c, n_pen, sqdt):
    """(mean shift, lifted coefficient, residual distance) for target ``c``."""
    d = abs(c - z0)
    if d == 0.0:
        return 0.0, z0, 0.0
    if math.isinf(n_pen):
        phi = 1.0
    else:
        phi = min(1.0, n_pen * sqdt * min(1.0, d) / d)
    if phi >= 1.0:
        return sqdt * d, c, 0.0
    return sqdt * phi * d, z0 + phi * (c - z0), (1.0 - phi) * d


@njit(cache=True, nogil=True)
def _side_solve(side, e, z0, y0, use_cons, lo, hi, s, has_w, wlo, whi, wsig, n_pen, sqdt, gp, dt, nob, L):
    """Fixed point for one lift side; ``nob > 0`` adds the obstacle penalty toward ``L``.

    Returns (y, dA, z, residual distance, iterations, status) with status 0 ok,
    1 no convergence, 2 no admissible target on this side.
    """
    dm = 0.0
    ze = z0
    rd = 0.0
    if use_cons and not has_w:
        c = _side_target(z0, lo, hi, s, -np.inf, np.inf, side)
        if c != c:
            return np.nan, 0.0, z0, 0.0, 0, 2
        dm, ze, rd = _partial(z0, c, n_pen, sqdt)
    yy = y0
    it = 0
    while it < MAX_ITERS:
        it += 1
        if use_cons and has_w:
            wl, wh = _wealth(has_w, wlo, whi, wsig, yy)
            c = _side_target(z0, lo, hi, s, wl, wh, side)
            if c != c:
                return np.nan, 0.0, z0, 0.0, it, 2
            dm, ze, rd = _partial(z0, c, n_pen, sqdt)
        if nob > 0.0:
            yn = (e + dm + (_g(gp, yy, ze) + nob * L) * dt) / (1.0 + nob * dt)
        else:
            yn = e + dm + _g(gp, yy, ze) * dt
        if abs(yn - yy) <= FP_TOL * max(1.0, abs(yn)):
            return yn, dm, ze, rd, it, 0
        yy = yn
    return yy, dm, ze, rd, it, 1


@njit(cache=True, nogil=True)
def _at_value(yv, e, z0, use_cons, lo, hi, s, has_w, wlo, whi, wsig, n_pen, sqdt, gp, dt):
    """Cheapest lift with the value fixed at ``yv``: (mean + lift + drift, dA, z, residual, ok)."""
    if not use_cons:
        return e + _g(gp, yv, z0) * dt, 0.0, z0, 0.0, True
    wl, wh = _wealth(has_w, wlo, whi, wsig, yv)
    best = np.inf
    bdm = 0.0
    bze = z0
    brd = 0.0
    found = False
    for side in (-1, 1):
        c = _side_target(z0, lo, hi, s, wl, wh, side)
        if c != c:
            continue
        dm, ze, rd = _partial(z0, c, n_pen, sqdt)
        v = e + dm + _g(gp, yv, ze) * dt
        if not found or v < best - TIE_RTOL * max(1.0, abs(best)):
            best, bdm, bze, brd = v, dm, ze, rd
            found = True
    return best, bdm, bze, brd, found


@njit(cache=True, nogil=True)
def _backward_numba(
    x, offsets, up, down, N, dt, terminal, gp,
    use_cons, lo, hi, scale, has_w, wlo, whi, wsig, n_pen,
    obs_kind, obs, n_obs,
    y, z, zraw, dA, dAbar, dK,
):
    sqdt = math.sqrt(dt)
    iters_max = 0
    max_viol = 0.0
    n_unsat = 0
    t0 = offsets[N]
    for j in range(offsets[N + 1] - t0):
        y[t0 + j] = terminal[j]
    for i in range(N - 1, -1, -1):
        lo_i = lo[i]
        hi_i = hi[i]
        for p in range(offsets[i], offsets[i + 1]):
            vu = y[up[p]]
            vd = y[down[p]]
            e = 0.5 * (vu + vd)
            z0 = (vu - vd) / (2.0 * sqdt)
            s = scale[p]
            L = obs[p]

            # free step: minimum over the two lift sides
            found = False
            yy = 0.0
            dm = 0.0
            ze = z0
            rd = 0.0
            nsides = 2 if use_cons else 1
            for k in range(nsides):
                side = -1 if k == 0 else 1
                ys, dms, zes, rds, it, st = _side_solve(
                    side, e, z0, e, use_cons, lo_i, hi_i, s, has_w, wlo, whi, wsig, n_pen, sqdt, gp, dt, 0.0, 0.0
                )
                iters_max = max(iters_max, it)
                if st == 1:
                    return p, 1, iters_max, max_viol, n_unsat
                if st == 2:
                    continue
                if not found or ys < yy - TIE_RTOL * max(1.0, abs(yy)):
                    yy, dm, ze, rd = ys, dms, zes, rds
                    found = True
            if not found:
                return p, 2, iters_max, max_viol, n_unsat

            push = (obs_kind == 1 and yy < L) or (obs_kind == 2 and yy > L)
            pen = 0.0
            if push:
                if math.isinf(n_obs):
                    yy = L
                    v, dm, ze, rd, ok = _at_value(
                        L, e, z0, use_cons, lo_i, hi_i, s, has_w, wlo, whi, wsig, n_pen, sqdt, gp, dt
                    )
                    if not ok:
                        return p, 2, iters_max, max_viol, n_unsat
                    pen = abs(L - v)
                else:
                    start = yy
                    found = False
                    for k in range(nsides):
                        side = -1 if k == 0 else 1
                        ys, dms, zes, rds, it, st = _side_solve(
                            side, e, z0, start, use_cons, lo_i, hi_i, s, has_w, wlo, whi, wsig,
                            n_pen, sqdt, gp, dt, n_obs, L,
                        )
                        iters_max = max(iters_max, it)
                        if st == 1:
                            return p, 1, iters_max, max_viol, n_unsat
                        if st == 2:
                            continue
                        if not found or ys < yy - TIE_RTOL * max(1.0, abs(yy)):
                            yy, dm, ze, rd = ys, dms, zes, rds
                            found = True
                    if not found:
                        return p, 2, iters_max, max_viol, n_unsat
                    pen = n_obs * abs(L - yy) * dt
            y[p] = yy
            z[p] = ze
            zraw[p] = z0
            dA[p] = dm
            if push:
                if obs_kind == 1:
                    dAbar[p] = pen
                else:
                    net = dm - pen
                    if net >= 0.0:
                        dA[p] = net
                    else:
                        dA[p] = 0.0
                        dK[p] = -net
            if rd > 0.0:
                n_unsat += 1
                if rd > max_viol:
                    max_viol = rd
    return -1, 0, iters_max, max_viol, n_unsat


def _run_numba(inp: KernelInputs) -> KernelOutputs:
    n = inp.x.shape[0]
    y = np.zeros(n)
    z = np.zeros(n)
    zraw = np.zeros(n)
    dA = np.zeros(n)
    dAbar = np.zeros(n)
    dK = np.zeros(n)
    gp = np.asarray(inp.params, dtype=np.float64)
    bad, code, iters, viol, unsat = _backward_numba(
        inp.x, inp.offsets, inp.up, inp.down, inp.N, inp.dt, inp.terminal, gp,
        inp.use_cons, inp.lo, inp.hi, inp.scale, inp.has_w, inp.wlo, inp.whi, inp.wsig,
        float(inp.n_pen), inp.obs_kind, inp.obs, float(inp.n_obs),
        y, z, zraw, dA, dAbar, dK,
    )
    if bad >= 0:
        _raise(code, bad, inp)
    return KernelOutputs(y, z, zraw, dA, dAbar, dK, int(iters), float(viol), int(unsat))


def _raise(code, node, inp):
    level = int(np.searchsorted(inp.offsets, node, side="right") - 1)
    j = int(node - inp.offsets[level])
    if code == 2:
        raise ConfigError(f"constraint set is empty at node (level {level}, node {j})")
    raise NumericError(
        f"implicit step did not converge in {MAX_ITERS} iterations at node (level {level}, node {j})"
    )


# --------------------------------------------------------------------------
# numpy level-vectorised kernel
# --------------------------------------------------------------------------


def _wealth_vec(inp, yy):
    n = yy.shape[0]
    wl = np.full(n, -np.inf)
    wh = np.full(n, np.inf)
    if inp.has_w:
        if not math.isinf(inp.wlo):
            wl = inp.wlo * inp.wsig * yy
        if not math.isinf(inp.whi):
            wh = inp.whi * inp.wsig * yy
    return wl, wh


def _side_target_vec(z0, lo, hi, s, wl, wh, side):
    best = np.full(z0.shape, np.nan)
    for k in range(lo.shape[0]):
        a = np.maximum(lo[k] * s, wl)
        b = np.minimum(hi[k] * s, wh)
        ok = a <= b
        if side < 0:
            ok &= a <= z0
            c = np.minimum(b, z0)
            better = ok & (np.isnan(best) | (c > best))
        else:
            ok &= b >= z0
            c = np.maximum(a, z0)
            better = ok & (np.isnan(best) | (c < best))
        best = np.where(better, c, best)
    return best


def _partial_vec(z0, c, n_pen, sqdt):
    d = np.abs(c - z0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if math.isinf(n_pen):
            phi = np.ones_like(d)
        else:
            phi = np.minimum(1.0, n_pen * sqdt * np.minimum(1.0, d) / d)
    zero = d == 0.0
    full = ~zero & (phi >= 1.0)
    part = ~zero & ~full
    dm = np.where(zero, 0.0, np.where(full, sqdt * d, sqdt * phi * d))
    ze = np.where(zero, z0, np.where(full, c, z0 + phi * (c - z0)))
    rd = np.where(part, (1.0 - phi) * d, 0.0)
    return dm, ze, rd


def _run_numpy(inp: KernelInputs) -> KernelOutputs:
    n = inp.x.shape[0]
    y = np.zeros(n)
    z = np.zeros(n)
    zraw = np.zeros(n)
    dA = np.zeros(n)
    dAbar = np.zeros(n)
    dK = np.zeros(n)
    g = inp.driver
    dt = inp.dt
    sqdt = math.sqrt(dt)
    N = inp.N
    off = inp.offsets
    y[off[N] : off[N + 1]] = inp.terminal
    iters_max, max_viol, n_unsat = 0, 0.0, 0
    sides = (-1, 1) if inp.use_cons else (-1,)

    for i in range(N - 1, -1, -1):
        sl = slice(int(off[i]), int(off[i + 1]))
        ti = float(inp.t[off[i]])
        vu = y[inp.up[sl]]
        vd = y[inp.down[sl]]
        e = 0.5 * (vu + vd)
        z0 = (vu - vd) / (2.0 * sqdt)
        s = inp.scale[sl]
        m = e.shape[0]
        L = inp.obs[sl]

        def lift(side, yy):
            """(dA, z, residual, available) for one side at values ``yy``."""
            if not inp.use_cons:
                return np.zeros(m), z0, np.zeros(m), np.ones(m, dtype=bool)
            wl, wh = _wealth_vec(inp, yy)
            c = _side_target_vec(z0, inp.lo[i], inp.hi[i], s, wl, wh, side)
            ok = ~np.isnan(c)
            dm, ze, rd = _partial_vec(z0, np.where(ok, c, z0), inp.n_pen, sqdt)
            return dm, ze, rd, ok

        def side_solve(side, start, nob, Lp):
            yy = start.copy()
            ok = np.ones(m, dtype=bool)
            fixed = None if inp.has_w else lift(side, yy)
            for it in range(1, MAX_ITERS + 1):
                dm, ze, rd, av = fixed if fixed is not None else lift(side, yy)
                ok &= av
                if nob > 0:
                    yn = (e + dm + (g(ti, yy, ze) + nob * Lp) * dt) / (1.0 + nob * dt)
                else:
                    yn = e + dm + g(ti, yy, ze) * dt
                yn = np.where(ok, yn, yy)
                if np.all(np.abs(yn - yy) <= FP_TOL * np.maximum(1.0, np.abs(yn))):
                    return (yn, dm, ze, rd), ok, it
                yy = yn
            bad = np.nonzero(ok & (np.abs(yn - yy) > FP_TOL * np.maximum(1.0, np.abs(yn))))[0]
            _raise(1, int(off[i]) + int(bad[0]) if bad.size else int(off[i]), inp)

        def minimise(start, nob, Lp):
            nonlocal iters_max
            best, have = None, np.zeros(m, dtype=bool)
            for side in sides:
                vals, ok, it = side_solve(side, start, nob, Lp)
                iters_max = max(iters_max, it)
                if best is None:
                    best, have = vals, ok.copy()
                    continue
                yb = best[0]
                take = ok & (~have | (vals[0] < yb - TIE_RTOL * np.maximum(1.0, np.abs(yb))))
                best = tuple(np.where(take, a, b) for a, b in zip(vals, best))
                have |= ok
            if not have.all():
                _raise(2, int(off[i]) + int(np.argmin(have)), inp)
            return best

        yy, dm, ze, rd = minimise(e, 0.0, None)
        if inp.obs_kind == OBS_LOWER:
            push = yy < L
        elif inp.obs_kind == OBS_UPPER:
            push = yy > L
        else:
            push = np.zeros(m, dtype=bool)
        pen = np.zeros(m)
        if push.any():
            Lp = np.where(push, L, 0.0)
            if math.isinf(inp.n_obs):
                # cheapest admissible lift with the value pinned to the obstacle
                best, have = None, np.zeros(m, dtype=bool)
                for side in sides:
                    dm_s, ze_s, rd_s, ok = lift(side, Lp)
                    v = e + dm_s + g(ti, Lp, ze_s) * dt
                    cand = (v, dm_s, ze_s, rd_s)
                    if best is None:
                        best, have = cand, ok.copy()
                        continue
                    take = ok & (~have | (v < best[0] - TIE_RTOL * np.maximum(1.0, np.abs(best[0]))))
                    best = tuple(np.where(take, a, b) for a, b in zip(cand, best))
                    have |= ok
                if not have[push].all():
                    _raise(2, int(off[i]) + int(np.argmax(push & ~have)), inp)
                v, dm_p, ze_p, rd_p = best
                yy = np.where(push, L, yy)
                pen = np.where(push, np.abs(L - v), 0.0)
            else:
                yp, dm_p, ze_p, rd_p = minimise(yy, inp.n_obs, Lp)
                yy = np.where(push, yp, yy)
                pen = np.where(push, inp.n_obs * np.abs(L - yp) * dt, 0.0)
            dm = np.where(push, dm_p, dm)
            ze = np.where(push, ze_p, ze)
            rd = np.where(push, rd_p, rd)
        y[sl] = yy
        z[sl] = ze
        zraw[sl] = z0
        if inp.obs_kind == OBS_UPPER:
            net = dm - pen
            dA[sl] = np.where(push & (net < 0), 0.0, np.where(push, net, dm))
            dK[sl] = np.where(push & (net < 0), -net, 0.0)
        else:
            dA[sl] = dm
            dAbar[sl] = pen
        if (rd > 0).any():
            n_unsat += int((rd > 0).sum())
            max_viol = max(max_viol, float(rd.max()))
    return KernelOutputs(y, z, zraw, dA, dAbar, dK, iters_max, max_viol, n_unsat)


def run_backward(inp: KernelInputs, backend: str | None = None) -> KernelOutputs:
    backend = backend or default_backend()
    if backend == "numba" and HAVE_NUMBA and inp.params is not None:
        return _run_numba(inp)
    return _run_numpy(inp)
