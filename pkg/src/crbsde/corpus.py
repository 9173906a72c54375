"""Engine-versus-oracle agreement on the shipped corpus of small instances."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import config
from .lattice import build_lattice
from .oracle import brute_force_tree_solve
from .solver import solve_constrained_reflected, solve_penalized

FIELDS = ("y", "z", "dA", "dAbar", "dK")
CATEGORIES = ("plain", "penalized", "reflected_lower", "reflected_upper", "constrained_reflected")


def load_corpus(path=None) -> list[dict]:
    if path is None:
        text = resources.files("crbsde").joinpath("data/oracle_corpus.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    for entry in doc["instances"]:
        config.validate(entry["config"])
    return doc["instances"]


@dataclass
class Outcome:
    name: str
    category: str
    engine_root: float
    oracle_root: float
    max_abs_err: float
    field_errs: dict
    converged: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_instance(entry: dict, backend=None) -> Outcome:
    """Solve one corpus entry with the engine and the oracle and compare every field."""
    p = config.problem_of(entry["config"])
    lat = build_lattice(p.grid, p.market)
    cat = entry["category"]
    if cat == "constrained_reflected":
        res, rep = solve_constrained_reflected(p.payoff, p.gen, p.cons, p.obstacle, p.schedule, lat, backend=backend)
        n_pen, n_obs, converged = res.n_penalty, res.n_obs, rep.converged
    else:
        n_pen = config.penalty(entry.get("n_penalty", 0.0))
        n_obs = config.penalty(entry.get("n_obs"))
        cons = p.cons if cat == "penalized" or n_pen > 0 else None
        res = solve_penalized(p.payoff, p.gen, cons, n_pen, p.obstacle, n_obs, lat, backend=backend)
        converged = True
    orc = brute_force_tree_solve(p.payoff, p.gen, p.cons, p.obstacle, n_pen, p.grid, p.market, n_obs=n_obs)
    errs = {f: float(np.max(np.abs(orc.flat(f) - getattr(res, f).values))) for f in FIELDS}
    return Outcome(entry["name"], cat, res.root, orc.root, max(errs.values()), errs, converged)


def run_corpus(entries, threads: int = 1, backend=None) -> list[Outcome]:
    if threads <= 1:
        return [check_instance(e, backend) for e in entries]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda e: check_instance(e, backend), entries))
