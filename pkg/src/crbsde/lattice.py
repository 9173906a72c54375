"""Binomial discretisation of the Brownian driver and the stock.

Nodes are stored flat, level by level.  Each non-terminal node knows the
flat index of its up child (``dB = +sqrt(dt)``) and down child
(``dB = -sqrt(dt)``); both have probability 1/2.  Two layouts share this
representation:

* the recombining lattice (level ``i`` has ``i + 1`` nodes, node ``j`` counts
  up-moves, children ``j + 1`` and ``j``);
* the path tree (level ``i`` has ``2**i`` nodes, node ``k`` encodes the move
  history in binary, children ``2k + 1`` and ``2k``).

The path tree is what makes level-``t`` events that depend on the path, rather
than only on the current stock level, representable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, InputError, MarketModel, TimeGrid

MAX_TREE_LEVELS = 16


@dataclass(frozen=True, eq=False)
class Lattice:
    grid: TimeGrid
    market: MarketModel
    x: np.ndarray
    offsets: np.ndarray
    up: np.ndarray
    down: np.ndarray
    recombining: bool = True
    t: np.ndarray = field(repr=False, default=None)

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def sqdt(self) -> float:
        return math.sqrt(self.grid.dt)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def level(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def level_size(self, i: int) -> int:
        return int(self.offsets[i + 1] - self.offsets[i])

    def level_x(self, i: int) -> np.ndarray:
        return self.x[self.level(i)]

    def node_level(self) -> np.ndarray:
        return np.repeat(np.arange(self.N + 1), np.diff(self.offsets))

    def ancestor(self, i: int, k: np.ndarray, t: int) -> np.ndarray:
        """Index within level ``t`` of the level-``t`` ancestor of level-``i`` nodes ``k``."""
        if t == 0:
            return np.zeros_like(np.asarray(k))
        if self.recombining:
            raise InputError("ancestors are path dependent on a recombining lattice")
        return np.asarray(k) >> (i - t)

    def truncate(self, level: int) -> "Lattice":
        """The same lattice cut at ``level``, which becomes the new terminal level."""
        if not 1 <= level <= self.N:
            raise InputError(f"truncation level must be in 1..{self.N}, got {level}")
        n = int(self.offsets[level + 1])
        up = self.up[:n].copy()
        down = self.down[:n].copy()
        up[self.level(level)] = -1
        down[self.level(level)] = -1
        return Lattice(
            grid=TimeGrid(level * self.dt, level),
            market=self.market,
            x=self.x[:n],
            offsets=self.offsets[: level + 2],
            up=up,
            down=down,
            recombining=self.recombining,
            t=self.t[:n],
        )

    def same_shape(self, other: "Lattice") -> bool:
        return (
            self.recombining == other.recombining
            and self.N == other.N
            and self.dt == other.dt
            and np.array_equal(self.x, other.x)
        )


def _check_positivity(grid: TimeGrid, market: MarketModel) -> None:
    dt = grid.dt
    if not 1.0 + market.mu_drift * dt - market.sigma * math.sqrt(dt) > 0:
        raise ConfigError(
            "lattice positivity 1 + mu_drift*dt - sigma*sqrt(dt) > 0 violated; "
            f"max admissible dt is {market.max_positive_dt():.6g} (got dt = {dt:.6g})"
        )


def _factors(grid: TimeGrid, market: MarketModel) -> tuple[float, float]:
    dt = grid.dt
    sq = math.sqrt(dt)
    return 1.0 + market.mu_drift * dt + market.sigma * sq, 1.0 + market.mu_drift * dt - market.sigma * sq


def build_lattice(grid: TimeGrid, market: MarketModel) -> Lattice:
    """Recombining lattice with the multiplicative Euler stock step."""
    _check_positivity(grid, market)
    N = grid.N
    u, d = _factors(grid, market)
    sizes = np.arange(1, N + 2)
    offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    x = np.empty(offsets[-1])
    x[0] = market.x0
    for i in range(N):
        prev = x[offsets[i] : offsets[i + 1]]
        nxt = x[offsets[i + 1] : offsets[i + 2]]
        nxt[0] = prev[0] * d
        nxt[1:] = prev * u
    up = np.full(offsets[-1], -1, dtype=np.int64)
    down = np.full(offsets[-1], -1, dtype=np.int64)
    for i in range(N):
        j = np.arange(i + 1)
        up[offsets[i] + j] = offsets[i + 1] + j + 1
        down[offsets[i] + j] = offsets[i + 1] + j
    t = np.repeat(grid.times, sizes)
    return Lattice(grid, market, x, offsets, up, down, True, t)


def build_path_tree(grid: TimeGrid, market: MarketModel) -> Lattice:
    """Non-recombining tree over all ``2**N`` move histories."""
    if grid.N > MAX_TREE_LEVELS:
        raise ConfigError(f"path tree limited to N <= {MAX_TREE_LEVELS}, got {grid.N}")
    _check_positivity(grid, market)
    N = grid.N
    u, d = _factors(grid, market)
    sizes = 2 ** np.arange(N + 1)
    offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    x = np.empty(offsets[-1])
    x[0] = market.x0
    up = np.full(offsets[-1], -1, dtype=np.int64)
    down = np.full(offsets[-1], -1, dtype=np.int64)
    for i in range(N):
        k = np.arange(2**i)
        prev = x[offsets[i] : offsets[i + 1]]
        x[offsets[i + 1] + 2 * k + 1] = prev * u
        x[offsets[i + 1] + 2 * k] = prev * d
        up[offsets[i] + k] = offsets[i + 1] + 2 * k + 1
        down[offsets[i] + k] = offsets[i + 1] + 2 * k
    t = np.repeat(grid.times, sizes)
    return Lattice(grid, market, x, offsets, up, down, False, t)


@dataclass(frozen=True, eq=False)
class NodeField:
    """Values attached to every node of a lattice (flat storage)."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.lattice.size,):
            raise InputError(
                f"field has shape {self.values.shape}, lattice has {self.lattice.size} nodes"
            )

    def level(self, i: int) -> np.ndarray:
        return self.values[self.lattice.level(i)]

    @property
    def root(self) -> float:
        return float(self.values[0])

    def levels(self) -> list[np.ndarray]:
        return [self.level(i) for i in range(self.lattice.N + 1)]

    def rows(self):
        """Yield ``(level, node, value)`` triples in storage order."""
        for i in range(self.lattice.N + 1):
            for j, v in enumerate(self.level(i)):
                yield i, j, float(v)

    def to_csv(self, path, name: str = "value") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "node", name])
            for i, j, v in self.rows():
                w.writerow([i, j, repr(v)])


def step_expectation(next_level: np.ndarray, j: int) -> float:
    """One-step mean at node ``j`` from the recombining successor level."""
    return 0.5 * (next_level[j + 1] + next_level[j])


def step_martingale_coeff(next_level: np.ndarray, j: int, dt: float) -> float:
    """``E[v_{i+1} dB] / dt`` at node ``j`` of a recombining lattice."""
    return (next_level[j + 1] - next_level[j]) / (2.0 * math.sqrt(dt))


def level_expectation(lat: Lattice, values: np.ndarray, i: int) -> np.ndarray:
    """Vectorised one-step mean for every node of level ``i`` (any layout)."""
    s = lat.level(i)
    return 0.5 * (values[lat.up[s]] + values[lat.down[s]])


def level_martingale_coeff(lat: Lattice, values: np.ndarray, i: int) -> np.ndarray:
    s = lat.level(i)
    return (values[lat.up[s]] - values[lat.down[s]]) / (2.0 * lat.sqdt)
