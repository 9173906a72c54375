import itertools
import math

import numpy as np
import pytest

from crbsde.core import ConfigError, InputError, MarketModel, TimeGrid
from crbsde.lattice import (
    NodeField,
    build_lattice,
    build_path_tree,
    level_expectation,
    level_martingale_coeff,
    step_expectation,
    step_martingale_coeff,
)


def test_deterministic_constant_stock():
    lat = build_lattice(TimeGrid(1.0, 7), MarketModel(x0=1.0, mu_drift=0.0, sigma=0.0))
    assert np.all(lat.x == 1.0)


def test_one_step_values():
    lat = build_lattice(TimeGrid(1.0, 1), MarketModel(x0=100.0, mu_drift=0.0, sigma=0.2))
    assert lat.level_x(1) == pytest.approx([80.0, 120.0])


def test_matches_path_by_path_products():
    m = MarketModel(x0=100.0, mu_drift=0.05, sigma=0.2)
    for N in (4, 6):
        grid = TimeGrid(1.0, N)
        lat = build_lattice(grid, m)
        dt = grid.dt
        u = 1 + m.mu_drift * dt + m.sigma * math.sqrt(dt)
        d = 1 + m.mu_drift * dt - m.sigma * math.sqrt(dt)
        for i in range(N + 1):
            for path in itertools.product((0, 1), repeat=i):
                v = m.x0
                for step in path:
                    v *= u if step else d
                j = sum(path)
                assert lat.level_x(i)[j] == pytest.approx(v, rel=1e-12)


def test_recombining_matches_tree_nodewise():
    m = MarketModel(x0=1.0, mu_drift=0.05, sigma=0.3)
    grid = TimeGrid(1.0, 6)
    lat, tree = build_lattice(grid, m), build_path_tree(grid, m)
    for i in range(grid.N + 1):
        k = np.arange(2**i)
        ups = np.array([bin(v).count("1") for v in k])
        assert np.allclose(tree.level_x(i), lat.level_x(i)[ups], rtol=1e-12, atol=0)


def test_children_layout():
    lat = build_lattice(TimeGrid(1.0, 3), MarketModel())
    s = lat.level(1)
    assert list(lat.up[s]) == [lat.offsets[2] + 1, lat.offsets[2] + 2]
    assert list(lat.down[s]) == [lat.offsets[2], lat.offsets[2] + 1]
    assert np.all(lat.up[lat.level(3)] == -1)
    tree = build_path_tree(TimeGrid(1.0, 3), MarketModel())
    assert tree.up[tree.offsets[1] + 1] == tree.offsets[2] + 3
    assert list(tree.ancestor(3, np.arange(8), 1)) == [0, 0, 0, 0, 1, 1, 1, 1]


def test_positive_stock_and_positivity_error():
    lat = build_lattice(TimeGrid(1.0, 200), MarketModel(mu_drift=0.08, sigma=0.2))
    assert np.all(lat.x > 0)
    with pytest.raises(ConfigError, match="max admissible dt"):
        build_lattice(TimeGrid(4.0, 1), MarketModel(mu_drift=0.0, sigma=0.8))


def test_step_operator_examples(rng):
    assert step_expectation(np.array([3.0, 3.0]), 0) == 3.0
    assert step_expectation(np.array([0.0, 2.0]), 0) == 1.0
    dt = 0.04
    sq = math.sqrt(dt)
    assert step_martingale_coeff(np.array([5.0, 5.0]), 0, dt) == 0.0
    assert step_martingale_coeff(np.array([-sq, sq]), 0, dt) == pytest.approx(1.0)
    v = rng.normal(size=5)
    for j in range(4):
        branches = [v[j + 1], v[j]]
        assert step_expectation(v, j) == pytest.approx(sum(branches) / 2)


def test_martingale_coeff_of_stock_with_zero_drift():
    m = MarketModel(x0=2.0, mu_drift=0.0, sigma=0.3)
    lat = build_lattice(TimeGrid(1.0, 5), m)
    for i in range(lat.N):
        z = level_martingale_coeff(lat, lat.x, i)
        assert np.allclose(z, m.sigma * lat.level_x(i), rtol=1e-12)


def test_constant_field_has_zero_martingale_part(small_lattice):
    v = np.full(small_lattice.size, 3.7)
    for i in range(small_lattice.N):
        assert np.all(level_martingale_coeff(small_lattice, v, i) == 0.0)


def test_tower_property_by_enumeration(market, rng):
    for N in (2, 4, 6):
        lat = build_lattice(TimeGrid(1.0, N), market)
        v = rng.normal(size=lat.size)
        for i in range(N - 1):
            once = np.zeros(lat.size)
            once[lat.level(i + 1)] = level_expectation(lat, v, i + 1)
            twice = level_expectation(lat, once, i)
            four = []
            for j in range(i + 1):
                paths = [v[lat.offsets[i + 2] + j + a + b] for a in (0, 1) for b in (0, 1)]
                four.append(np.mean(paths))
            assert np.allclose(twice, four, atol=1e-14)


def test_truncate_and_node_field(tmp_path, small_lattice):
    t = small_lattice.truncate(3)
    assert t.N == 3 and t.size == 10 and np.all(t.up[t.level(3)] == -1)
    with pytest.raises(InputError):
        small_lattice.truncate(0)
    f = NodeField(t, np.arange(10.0))
    assert f.root == 0.0 and list(f.level(2)) == [3.0, 4.0, 5.0]
    f.to_csv(tmp_path / "f.csv", "y")
    lines = (tmp_path / "f.csv").read_bytes().split(b"\n")
    assert lines[0] == b"level,node,y" and lines[1] == b"0,0,0.0" and b"\r" not in lines[2]
    with pytest.raises(InputError):
        NodeField(t, np.zeros(3))


def test_ancestor_on_recombining_lattice(small_lattice):
    assert list(small_lattice.ancestor(3, np.arange(4), 0)) == [0, 0, 0, 0]
    with pytest.raises(InputError):
        small_lattice.ancestor(3, np.arange(4), 1)
    with pytest.raises(ConfigError):
        build_path_tree(TimeGrid(1.0, 17), MarketModel())
