"""Command-line runners.

``crbsde <command> [--config FILE] [--out DIR] [--threads N] [--seed S]``

Exit status: 0 on success, 2 when a run finished without converging or a
check failed, 1 on invalid input.  Reports are JSON, sweeps and surfaces CSV.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, config
from .core import ConfigError, InputError, NumericError
from .corpus import load_corpus, run_corpus
from .decomposition import decompose_submartingale, decompose_supermartingale
from .expectation import axiom_suite, default_corpus, risk_measure, structure_suite
from .lattice import build_lattice
from .pricing import identity_suite, price
from .solver import MODES, solve_constrained_reflected

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
SELFTEST_TOL = 1e-10


def _map(fn, items, threads: int) -> list:
    """Ordered map; results are assembled in input order whatever the thread count."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    with open(p, "w", newline="\n") as fh:
        fh.write(text)
    return p


def _header(command: str, args, doc) -> dict:
    h = {"command": command, "version": __version__}
    if command == "properties":
        h["seed"] = args.seed
    if doc is not None:
        h["config"] = doc
    return h


def _opts(doc) -> dict:
    return (doc or {}).get("command_options", {}) or {}


# --------------------------------------------------------------------------
# commands; each returns (exit status, report dict)
# --------------------------------------------------------------------------


def cmd_price(doc, args, out: Path):
    p = config.problem_of(doc)
    opt = config.option_of(doc)
    rep = price(opt, p.market, p.cons, p.grid, p.schedule)
    rep.hedge_csv(out / "hedge.csv")
    rep.boundary_csv(out / "boundary.csv")
    rep.convergence.to_csv(out / "convergence.csv")
    print(f"price {rep.price:.10g}  converged={rep.converged}")
    return (EXIT_OK if rep.converged else EXIT_NOT_CONVERGED), rep.to_dict()


def cmd_converge(doc, args, out: Path):
    p = config.problem_of(doc)
    lat = build_lattice(p.grid, p.market)
    modes = _opts(doc).get("modes", list(MODES))
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"$.command_options.modes: unknown mode(s) {bad}; expected {list(MODES)}")

    def run(mode):
        return solve_constrained_reflected(p.payoff, p.gen, p.cons, p.obstacle, p.schedule.with_mode(mode), lat)

    results = _map(run, modes, args.threads)
    body = {}
    for mode, (res, rep) in zip(modes, results):
        rep.to_csv(out / f"converge_{mode}.csv")
        d = rep.to_dict()
        d["root"] = res.root
        d["monotone"] = rep.is_monotone()
        d["diagnostics"] = res.diagnostics.to_dict()
        body[mode] = d
        print(f"{mode:17s} root {res.root:.10g}  levels {len(rep.rows)}  converged={rep.converged}")
    roots = [r.root for r, _ in results]
    spread = float(max(roots) - min(roots))
    ok = all(rep.converged for _, rep in results)
    return (EXIT_OK if ok else EXIT_NOT_CONVERGED), {"modes": body, "root_spread": spread}


def cmd_properties(doc, args, out: Path):
    opts = _opts(doc)
    size = int(opts.get("corpus_size", 20))
    corpus = default_corpus(seed=args.seed, size=size)

    def run(e):
        a = axiom_suite(e.inst, e.payoffs, seed=args.seed)
        s = structure_suite(e.inst, e.payoffs[0], e.payoffs[2], eta=e.eta, t_level=e.t_level)
        r = risk_measure(e.inst, e.payoffs[0])
        return {"name": e.name, "axioms": a.to_dict(), "structure": s.to_dict(), "risk": r.to_dict()}

    rows = _map(run, corpus, args.threads)
    fails = skips = 0
    for row in rows:
        checks = row["axioms"]["checks"] + row["structure"]["checks"]
        fails += sum(c["status"] == "fail" for c in checks) + (not row["risk"]["dominates"])
        skips += sum(c["status"] == "skipped" for c in checks)
    print(f"properties: {len(rows)} instances, {fails} failures, {skips} skipped checks")
    body = {"instances": rows, "failures": fails, "skipped": skips}
    return (EXIT_OK if fails == 0 else EXIT_NOT_CONVERGED), body


def cmd_decompose(doc, args, out: Path):
    """Round trip of the configured solution, then a drifted submartingale when allowed."""
    p = config.problem_of(doc)
    lat = build_lattice(p.grid, p.market)
    res, rep = solve_constrained_reflected(p.payoff, p.gen, p.cons, p.obstacle, p.schedule, lat)
    if not rep.converged:
        print("decompose: the configured solve did not converge")
        return EXIT_NOT_CONVERGED, {"converged": False}
    sup = decompose_supermartingale(res.y, p.gen, p.cons, lat, p.schedule)
    sup.z.to_csv(out / "super_z.csv", "z")
    sup.A.to_csv(out / "super_dA.csv", "dA")
    body = {"supermartingale": sup.to_dict()}
    body["supermartingale"]["z_error"] = float(np.max(np.abs(sup.z.values - res.z.values)))
    body["supermartingale"]["dA_error"] = float(
        np.max(np.abs(sup.A.values - res.dA.values - res.dAbar.values))
    )
    ok = sup.is_decomposable

    drift = float(_opts(doc).get("submartingale_drift", 0.01))
    base, brep = solve_constrained_reflected(p.payoff, p.gen, p.cons, None, p.schedule, lat)
    Y = base.y.values + drift * lat.t
    try:
        sub = decompose_submartingale(Y, p.gen, p.cons, lat, p.schedule)
    except InputError as exc:
        body["submartingale"] = {"status": "skipped", "reason": str(exc)}
    else:
        sub.K.to_csv(out / "sub_K.csv", "K")
        body["submartingale"] = dict(sub.to_dict(), status="ran", drift=drift)
        ok = ok and sub.is_decomposable and brep.converged
    print(f"decompose: supermartingale round trip {'ok' if sup.is_decomposable else 'FAILED'}; "
          f"submartingale {body['submartingale'].get('status')}")
    return (EXIT_OK if ok else EXIT_NOT_CONVERGED), body


def cmd_identities(doc, args, out: Path):
    doc = doc or {}
    market = config.market_of(doc)
    grid = config.grid_of(doc)
    sched = config.schedule_of(doc)
    strike = (doc.get("option") or {}).get("strike")
    rep = identity_suite(market, grid, sched, strike=strike)
    for c in rep.checks:
        print(f"{c.name:24s} constrained {c.constrained:.8g}  reference {c.unconstrained:.8g}  "
              f"gap {100 * c.rel_gap:.4f}%  {'ok' if c.ok else 'FAIL'}")
    return (EXIT_OK if rep.ok else EXIT_NOT_CONVERGED), rep.to_dict()


def cmd_selftest(doc, args, out: Path):
    path = _opts(doc).get("corpus")
    entries = load_corpus(path)
    outcomes = run_corpus(entries, threads=args.threads)
    worst = max(o.max_abs_err for o in outcomes)
    fails = [o.name for o in outcomes if not o.max_abs_err <= SELFTEST_TOL]
    for o in outcomes:
        print(f"{o.name:32s} {o.category:22s} err {o.max_abs_err:.2e}")
    print(f"selftest: {len(outcomes)} instances, max error {worst:.2e}, {len(fails)} above {SELFTEST_TOL:g}")
    body = {"instances": [o.to_dict() for o in outcomes], "max_abs_err": worst, "failures": fails,
            "tolerance": SELFTEST_TOL}
    return (EXIT_OK if not fails else EXIT_NOT_CONVERGED), body


COMMANDS = {
    "price": (cmd_price, True),
    "converge": (cmd_converge, True),
    "properties": (cmd_properties, False),
    "decompose": (cmd_decompose, True),
    "identities": (cmd_identities, False),
    "selftest": (cmd_selftest, False),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crbsde", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="JSON configuration document")
    ap.add_argument("--out", default=".", help="directory for report files (default: current)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    ap.add_argument("--seed", type=int, default=0, help="seed for property sampling (default 0)")
    ap.add_argument("--version", action="version", version=f"crbsde {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, needs_config = COMMANDS[args.command]
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if needs_config and not args.config:
            raise ConfigError(f"{args.command} needs --config")
        doc = config.load(args.config) if args.config else None
        out = Path(args.out)
        os.makedirs(out, exist_ok=True)
        status, body = fn(doc, args, out)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    report = {"header": _header(args.command, args, doc), "status": status, "report": body}
    _write(out, f"{args.command}.json", config.dumps(report))
    return status


if __name__ == "__main__":
    sys.exit(main())
