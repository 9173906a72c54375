"""JSON configuration: schema validation and construction of domain objects.

Intervals are ``[lo, hi]`` pairs with ``null`` for an infinite end.  Penalty
weights accept a number, or ``null`` / ``"inf"`` for the exact limit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Optional

import jsonschema
import numpy as np

from .core import (
    INF,
    ConfigError,
    ConstraintSpec,
    GeneratorSpec,
    MarketModel,
    ObstacleSpec,
    TerminalPayoff,
    TimeGrid,
)
from .pricing import OptionSpec
from .solver import MODES, PenaltySchedule

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_pair = {"type": "array", "items": _opt_num, "minItems": 2, "maxItems": 2}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["N"],
            "properties": {"T": {"type": "number", "exclusiveMinimum": 0}, "N": {"type": "integer", "minimum": 1}},
        },
        "market": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x0": {"type": "number", "exclusiveMinimum": 0},
                "mu_drift": _num,
                "sigma": {"type": "number", "minimum": 0},
                "r": {"type": "number", "minimum": 0},
            },
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear_wealth", "zero", "parametric", "sin"]},
                "a_y": _num, "a_z": _num, "c_y": _num, "c_z": _num, "k0": _num,
                "z_cap": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "c": _num,
            },
        },
        "constraint": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "intervals": {"type": "array", "items": _pair, "minItems": 1},
                "units": {"enum": ["z", "shares", "amount"]},
                "wealth_bounds": {"anyOf": [_pair, {"type": "null"}]},
            },
        },
        "obstacle": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "lower", "upper"]},
                "form": {"enum": ["put", "call", "constant", "linear"]},
                "strike": _num,
                "level": _num,
                "slope": _num,
                "active_until": _opt_num,
            },
        },
        "option": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["call", "put", "stock", "constant", "digital"]},
                "strike": _num,
                "exercise": {"enum": ["american", "european"]},
                "value": _num,
                "scale": _num,
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": list(MODES)},
                "levels": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "powers": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "stop_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_levels": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "command_options": {"type": "object"},
    },
}


def validate(doc: dict) -> None:
    """Raise ConfigError listing every schema violation with its field path."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errs:
        lines = []
        for e in errs:
            path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
            lines.append(f"{path}: {e.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))


def load(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    validate(doc)
    return doc


def penalty(v) -> float:
    if v is None or v == "inf":
        return INF
    return float(v)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def grid_of(doc: dict) -> TimeGrid:
    g = doc.get("grid", {})
    return TimeGrid(float(g.get("T", 1.0)), int(g.get("N", 200)))


def market_of(doc: dict) -> MarketModel:
    return MarketModel(**doc.get("market", {}))


def generator_of(doc: dict, market: MarketModel) -> GeneratorSpec:
    g = dict(doc.get("generator", {"kind": "linear_wealth"}))
    kind = g.pop("kind", "linear_wealth")
    if kind == "linear_wealth":
        return GeneratorSpec.linear_wealth(market.r, market.mu_drift, market.sigma)
    if kind == "zero":
        return GeneratorSpec.zero()
    if kind == "sin":
        c = float(g.get("c", 0.5))
        return GeneratorSpec(lambda t, y, z: c * np.sin(y), lipschitz_mu=abs(c), name="sin")
    if g.get("z_cap", 0) is None:
        g["z_cap"] = INF
    g.pop("c", None)
    return GeneratorSpec.parametric(**g)


def constraint_of(doc: dict, market: MarketModel) -> Optional[ConstraintSpec]:
    c = doc.get("constraint")
    if not c:
        return None
    units = c.get("units", "z")
    wb = c.get("wealth_bounds")
    sigma = market.sigma if (units != "z" or wb is not None) else None
    return ConstraintSpec(
        intervals=tuple(tuple(p) for p in c.get("intervals", [[None, None]])),
        units=units,
        sigma=sigma,
        wealth_bounds=None if wb is None else tuple(wb),
    )


def payoff_of(doc: dict) -> TerminalPayoff:
    o = doc.get("option") or {"kind": "put", "strike": 100.0}
    kind = o.get("kind", "put")
    k = float(o.get("strike", 100.0))
    scale = float(o.get("scale", 1.0))
    if kind == "call":
        return TerminalPayoff(lambda x: scale * np.maximum(x - k, 0.0), name="call")
    if kind == "put":
        return TerminalPayoff(lambda x: scale * np.maximum(k - x, 0.0), name="put")
    if kind == "stock":
        return TerminalPayoff(lambda x: scale * np.asarray(x, dtype=float), name="stock")
    if kind == "digital":
        return TerminalPayoff(lambda x: scale * (np.asarray(x) > k).astype(float), name="digital")
    return TerminalPayoff.constant(float(o.get("value", 0.0)))


def option_of(doc: dict) -> OptionSpec:
    o = doc.get("option") or {}
    kind = o.get("kind", "put")
    if kind not in ("call", "put"):
        raise ConfigError(f"$.option.kind: pricing supports call|put, got {kind!r}")
    return OptionSpec(kind, float(o.get("strike", 100.0)), o.get("exercise", "american"))


def obstacle_of(doc: dict) -> Optional[ObstacleSpec]:
    """Explicit ``obstacle`` section, else the exercise value of an American option."""
    ob = doc.get("obstacle")
    if ob is None:
        o = doc.get("option") or {}
        if o.get("exercise") == "american" and o.get("kind", "put") in ("call", "put"):
            k = float(o.get("strike", 100.0))
            if o.get("kind", "put") == "put":
                return ObstacleSpec.lower(lambda t, x: np.maximum(k - x, 0.0))
            return ObstacleSpec.lower(lambda t, x: np.maximum(x - k, 0.0))
        return None
    kind = ob.get("kind", "lower")
    if kind == "none":
        return None
    form = ob.get("form", "constant")
    k = float(ob.get("strike", 0.0))
    lev = float(ob.get("level", 0.0))
    slope = float(ob.get("slope", 0.0))
    until = ob.get("active_until")
    absent = -INF if kind == "lower" else INF

    def base(t, x):
        x = np.asarray(x, dtype=float)
        if form == "put":
            return np.maximum(k - x, 0.0) + lev
        if form == "call":
            return np.maximum(x - k, 0.0) + lev
        if form == "linear":
            return lev + slope * x
        return np.full(x.shape, lev)

    def level(t, x):
        v = base(t, x)
        if until is None:
            return v
        # tolerance keeps grid times equal to the cut-off on the active side
        return np.where(np.asarray(t) <= until + 1e-12, v, absent)

    return ObstacleSpec(kind, level)


def schedule_of(doc: dict) -> PenaltySchedule:
    s = doc.get("schedule", {})
    kw: dict[str, Any] = {}
    if "mode" in s:
        kw["mode"] = s["mode"]
    if "levels" in s:
        kw["levels"] = tuple(s["levels"])
    elif "powers" in s:
        lo, hi = s["powers"]
        kw["levels"] = tuple(float(2.0**k) for k in range(lo, hi + 1))
    if "stop_tol" in s:
        kw["stop_tol"] = s["stop_tol"]
    if s.get("max_levels") is not None:
        kw["max_levels"] = s["max_levels"]
    return PenaltySchedule(**kw)


@dataclass
class Problem:
    """A fully built problem: everything a solver needs from a config document."""

    grid: TimeGrid
    market: MarketModel
    gen: GeneratorSpec
    cons: Optional[ConstraintSpec]
    obstacle: Optional[ObstacleSpec]
    payoff: TerminalPayoff
    schedule: PenaltySchedule


def problem_of(doc: dict) -> Problem:
    market = market_of(doc)
    return Problem(
        grid=grid_of(doc),
        market=market,
        gen=generator_of(doc, market),
        cons=constraint_of(doc, market),
        obstacle=obstacle_of(doc),
        payoff=payoff_of(doc),
        schedule=schedule_of(doc),
    )


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as strings."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    return o
