"""Regenerate ``src/crbsde/data/oracle_corpus.json``.

Each entry is a small configuration (N <= 6) plus the penalty weights to use.
The oracle root value is stored for reference; the selftest recomputes it.
"""

import json
from pathlib import Path

from crbsde.corpus import check_instance

M = {"x0": 1.0, "mu_drift": 0.08, "sigma": 0.2, "r": 0.05}
LW = {"kind": "linear_wealth"}
ZERO = {"kind": "zero"}
PAR = {"kind": "parametric", "a_y": -0.2, "a_z": 0.3, "c_y": 0.1, "c_z": -0.2, "k0": 0.05}
CAP = {"kind": "parametric", "a_y": 0.1, "c_z": 0.4, "z_cap": 0.5}
SIN = {"kind": "sin", "c": 0.8}
PUT = {"kind": "put", "strike": 1.0}
CALL = {"kind": "call", "strike": 1.0}
AM_PUT = {"kind": "put", "strike": 1.0, "exercise": "american"}
AM_CALL = {"kind": "call", "strike": 1.0, "exercise": "american"}
NSS = {"intervals": [[0, None]], "units": "shares"}
NOB = {"intervals": [[None, None]], "units": "amount", "wealth_bounds": [None, 1.0]}
UNION = {"intervals": [[None, -0.3], [-0.05, 0.08], [0.4, 0.6]]}
GAPS = {"intervals": [[None, -0.2], [0.05, 0.1], [0.3, None]]}
STEEP = {"kind": "parametric", "a_y": -0.1, "a_z": -0.9, "c_z": 0.05}


def cfg(N, gen, option, constraint=None, obstacle=None, schedule=None, T=1.0, market=M):
    d = {"grid": {"T": T, "N": N}, "market": market, "generator": gen, "option": option}
    if constraint is not None:
        d["constraint"] = constraint
    if obstacle is not None:
        d["obstacle"] = obstacle
    if schedule is not None:
        d["schedule"] = schedule
    return d


def entry(name, category, c, n_penalty=0.0, n_obs=None):
    return {"name": name, "category": category, "config": c, "n_penalty": n_penalty, "n_obs": n_obs}


INSTANCES = [
    entry("plain_constant", "plain", cfg(3, ZERO, {"kind": "constant", "value": 0.7})),
    entry("plain_wealth_call", "plain", cfg(6, LW, CALL)),
    entry("plain_parametric_put", "plain", cfg(5, PAR, PUT)),
    entry("plain_sin_digital", "plain", cfg(6, SIN, {"kind": "digital", "strike": 1.02})),
    entry("pen_zero_neg_stock", "penalized", cfg(6, ZERO, {"kind": "stock", "scale": -1.0}, {"intervals": [[0, None]]}), 2.0),
    entry("pen_wealth_band_call", "penalized", cfg(5, LW, CALL, {"intervals": [[-0.05, 0.05]]}), 10.0),
    entry("pen_capped_union_put", "penalized", cfg(6, CAP, PUT, UNION), 1000.0),
    entry("pen_wealth_shares_put", "penalized", cfg(6, LW, PUT, NSS), 3.0),
    entry("pen_sin_no_borrowing", "penalized", cfg(4, SIN, PUT, NOB), None),
    entry("pen_parametric_band_exact", "penalized", cfg(6, PAR, CALL, {"intervals": [[-0.1, 0.02]]}), None),
    entry("pen_gaps_steep_step", "penalized",
          cfg(6, STEEP, {"kind": "digital", "strike": 1.0, "scale": -0.8}, GAPS), None),
    entry("pen_gaps_steep_finite", "penalized",
          cfg(6, STEEP, {"kind": "digital", "strike": 1.0, "scale": -0.8}, GAPS), 1.5),
    entry("lower_american_put", "reflected_lower", cfg(6, LW, AM_PUT)),
    entry(
        "lower_barrier_until_half", "reflected_lower",
        cfg(4, ZERO, {"kind": "constant", "value": 0.0},
            obstacle={"kind": "lower", "form": "constant", "level": 0.5, "active_until": 0.5}),
    ),
    entry("lower_call_penalty", "reflected_lower",
          cfg(5, PAR, CALL, obstacle={"kind": "lower", "form": "call", "strike": 1.0}), 0.0, 50.0),
    entry("lower_put_penalty_2e10", "reflected_lower", cfg(4, LW, AM_PUT), 0.0, 1024.0),
    entry("upper_constant_digital", "reflected_upper",
          cfg(6, ZERO, {"kind": "digital", "strike": 1.0, "scale": 0.1},
              obstacle={"kind": "upper", "form": "constant", "level": 0.03, "active_until": 0.5})),
    entry("upper_call_cap", "reflected_upper",
          cfg(6, LW, CALL, obstacle={"kind": "upper", "form": "call", "strike": 1.0, "level": 0.02})),
    entry("upper_parametric_penalty", "reflected_upper",
          cfg(5, PAR, PUT, obstacle={"kind": "upper", "form": "put", "strike": 1.0, "level": 0.01}), 0.0, 20.0),
    entry("cr_put_nss_obstacle_first", "constrained_reflected", cfg(6, LW, AM_PUT, NSS)),
    entry("cr_put_nss_constraint_first", "constrained_reflected",
          cfg(6, LW, AM_PUT, NSS, schedule={"mode": "constraint_first", "powers": [0, 40]})),
    entry("cr_put_nss_diagonal", "constrained_reflected",
          cfg(6, LW, AM_PUT, NSS, schedule={"mode": "diagonal", "powers": [0, 40]})),
    entry("cr_put_no_borrowing", "constrained_reflected", cfg(6, LW, AM_PUT, NOB)),
    entry("cr_upper_zero_cone", "constrained_reflected",
          cfg(6, ZERO, CALL, {"intervals": [[0, None]]},
              obstacle={"kind": "upper", "form": "call", "strike": 1.0, "level": 0.05})),
    entry("cr_capped_union_lower", "constrained_reflected",
          cfg(5, CAP, PUT, UNION, obstacle={"kind": "lower", "form": "put", "strike": 0.98})),
    entry("cr_gaps_steep_lower", "constrained_reflected",
          cfg(6, STEEP, {"kind": "digital", "strike": 1.0, "scale": -0.8}, GAPS,
              obstacle={"kind": "lower", "form": "put", "strike": 1.0, "level": -0.85})),
    entry("cr_call_nss", "constrained_reflected", cfg(6, LW, AM_CALL, NSS)),
]


def main():
    out = []
    for e in INSTANCES:
        o = check_instance(e)
        if o.max_abs_err > 1e-10:
            raise SystemExit(f"{e['name']}: engine and oracle disagree by {o.max_abs_err}")
        out.append(dict(e, oracle_root=o.oracle_root))
        print(f"{e['name']:32s} {o.oracle_root: .12f}  err {o.max_abs_err:.1e}")
    path = Path(__file__).resolve().parents[1] / "src" / "crbsde" / "data" / "oracle_corpus.json"
    path.write_text(json.dumps({"instances": out}, indent=2) + "\n")


if __name__ == "__main__":
    main()
