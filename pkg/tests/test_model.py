import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynkin.errors import CalibrationInfeasible, ConfigError, ObstacleOrderViolation, SizeLimit, TerminalMismatch
from dynkin.model import (
    MarkSpace,
    TimeGrid,
    branch_layout,
    build_lattice,
    build_recombining,
    build_tree,
    is_predictable,
    tree_node_count,
    validate_obstacles,
)

from conftest import tree


def test_brownian_only_step():
    prob, dW, dN = branch_layout(0.25, MarkSpace.none())
    np.testing.assert_allclose(prob, [0.5, 0.5])
    np.testing.assert_allclose(dW, [0.5, -0.5])
    assert dN.shape == (2, 0)


def test_jump_branch_probability_and_compensated_increment():
    lat = tree(2, nus=(0.5,), T=0.2)
    assert lat.prob[2] == pytest.approx(0.05)
    assert lat.dNt[2, 0] == pytest.approx(0.95)
    assert lat.dNt[0, 0] == pytest.approx(-0.05)


def test_infeasible_intensity():
    with pytest.raises(CalibrationInfeasible):
        branch_layout(0.1, MarkSpace((1.0,), (20.0,)))


def test_zero_mass_atom_rejected():
    with pytest.raises(CalibrationInfeasible):
        branch_layout(0.1, MarkSpace((1.0,), (0.0,)))


@pytest.mark.parametrize("N,m", [(1, 0), (3, 0), (2, 1), (3, 2), (4, 1)])
def test_node_count(N, m):
    lat = tree(N, nus=(0.4,) * m)
    assert lat.n_nodes == sum((m + 2) ** n for n in range(N + 1)) == tree_node_count(N, m)
    assert int(np.sum(lat.is_terminal)) == (m + 2) ** N


@settings(max_examples=60, deadline=None)
@given(
    dt=st.floats(0.01, 0.5),
    nus=st.lists(st.floats(0.05, 1.5), min_size=0, max_size=3),
)
def test_moments_match_exactly(dt, nus):
    marks = MarkSpace(tuple(range(len(nus))), tuple(nus))
    if sum(nus) * dt >= 1:
        with pytest.raises(CalibrationInfeasible):
            branch_layout(dt, marks)
        return
    prob, dW, dN = branch_layout(dt, marks)
    nu = np.asarray(nus)
    dNt = dN - nu * dt
    assert prob.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(prob > 0)
    assert prob @ dW == pytest.approx(0.0, abs=1e-14)
    assert prob @ dW**2 == pytest.approx(dt, rel=1e-12)
    np.testing.assert_allclose(prob @ dNt, 0.0, atol=1e-14)
    np.testing.assert_allclose((prob * dW) @ dNt, 0.0, atol=1e-14)
    cov = (dNt * prob[:, None]).T @ dNt
    np.testing.assert_allclose(cov, np.diag(nu * dt) - np.outer(nu * dt, nu * dt), atol=1e-14)


def test_lattice_moment_errors_small():
    lat = tree(3, nus=(0.5, 0.7))
    assert max(lat.moment_errors().values()) < 1e-14


def test_projection_is_exact_interpolation(rng):
    lat = tree(1, nus=(0.4, 0.9), T=0.5)
    V = rng.normal(size=(5, lat.branching))
    coef = V @ lat.projector.T
    np.testing.assert_allclose(coef @ lat.basis.T, V, atol=1e-12)
    np.testing.assert_allclose(coef[:, 0], V @ lat.prob, atol=1e-12)


def test_expect_matches_weighted_children(rng):
    lat = tree(3, nus=(0.5,))
    v = rng.normal(size=lat.n_nodes)
    E = lat.expect(v, 1)
    idx = lat.nodes(1)
    np.testing.assert_allclose(E, v[lat.children[1]] @ lat.prob)
    assert len(E) == len(idx)


def test_node_cap():
    with pytest.raises(SizeLimit):
        build_tree(TimeGrid(1.0, 12), MarkSpace((0.1,), (0.5,)), max_nodes=1000)


def test_default_state_is_brownian_plus_compensated_jumps():
    lat = tree(2, nus=(0.5,), atoms=(0.7,))
    up = lat.children[0][0, 0]
    jump = lat.children[0][0, 2]
    assert lat.state[up] == pytest.approx(lat.dW[0] - 0.7 * 0.5 * lat.dt)
    assert lat.state[jump] == pytest.approx(0.7 * (1 - 0.5 * lat.dt))


def test_recombining_matches_tree_on_expectations():
    grid = TimeGrid(1.0, 4)
    marks = MarkSpace((0.5,), (0.6,))
    t = build_tree(grid, marks)
    r = build_recombining(grid, marks)
    f = np.tanh
    vt, vr = f(t.state), f(r.state)
    for n in range(3, -1, -1):
        vt[t.nodes(n)] = t.expect(vt, n)
        vr[r.nodes(n)] = r.expect(vr, n)
    assert vr[0] == pytest.approx(vt[0], abs=1e-13)
    assert r.n_nodes < t.n_nodes


def test_nonuniform_times_rejected():
    with pytest.raises(ConfigError):
        TimeGrid.from_times([0.0, 0.1, 0.3])
    g = TimeGrid.from_times([0.0, 0.5, 1.0])
    assert (g.T, g.N) == (1.0, 2)


def test_build_lattice_from_config():
    lat = build_lattice({"T": 2.0, "N": 2, "marks": [{"e": 0.2, "nu": 0.3}]})
    assert lat.dt == 1.0 and lat.m == 1
    with pytest.raises(ConfigError):
        build_lattice({"N": 2})
    with pytest.raises(ConfigError):
        build_lattice({"T": 1.0, "N": 2, "kind": "mesh"})


def test_obstacle_order_violation():
    lat = tree(2)
    n = lat.n_nodes
    with pytest.raises(ObstacleOrderViolation):
        validate_obstacles(lat, np.full(n, 2.0), np.full(n, 1.0))


def test_terminal_mismatch():
    lat = tree(1)
    with pytest.raises(TerminalMismatch):
        validate_obstacles(lat, np.zeros(3), np.array([1.0, 1.0, 0.5]))


def test_predictable_detection():
    lat = tree(2, nus=(0.5,))
    v = np.repeat(np.arange(lat.n_nodes), 1).astype(float)
    assert not is_predictable(lat, v)
    par = np.where(lat.parent >= 0, lat.parent, 0).astype(float)
    assert is_predictable(lat, par)


@pytest.mark.parametrize("N", [1, 2, 3])
def test_paths_carry_unit_probability(N):
    lat = tree(N, nus=(0.4,))
    total = 0.0
    for path in lat.paths(0):
        w = 1.0
        for node in path[1:]:
            w *= lat.prob[lat.branch[node]]
        total += w
    assert total == pytest.approx(1.0)
    assert math.isclose(lat.interior_count(0), lat.n_nodes - 3**N)
