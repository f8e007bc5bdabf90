import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynkin.drivers import LinearDriver, ZeroDriver
from dynkin.errors import StepContractionViolated
from dynkin.expectation import (
    StoppingRule,
    change_of_measure_value,
    density_weights,
    g_expectation,
    payoff_terminal,
    project,
    solve_bsde,
)

from conftest import tree


def band(lat, rng):
    xi = rng.normal(size=lat.n_nodes)
    zeta = xi + rng.exponential(size=lat.n_nodes)
    zeta[lat.is_terminal] = xi[lat.is_terminal]
    return xi, zeta


@pytest.mark.parametrize("beta,c", [(0.0, 0.0), (0.5, 1.0), (-0.8, 2.0)])
def test_one_step_linear_closed_form(beta, c, rng):
    lat = tree(1, nus=(0.4,), T=0.5)
    term = rng.normal(size=lat.n_nodes)
    g = LinearDriver(beta, (0.0,), c, lat.marks)
    Y = solve_bsde(lat, g, term).Y
    v = term[1:] @ lat.prob
    assert Y[0] == pytest.approx((v + c * lat.dt) / (1 - beta * lat.dt), rel=1e-12)


def test_step_contraction_guard():
    lat = tree(1, T=2.0)
    with pytest.raises(StepContractionViolated):
        solve_bsde(lat, LinearDriver(0.6, (), 0.0, lat.marks), np.zeros(lat.n_nodes))


def test_stop_at_root_pays_lower(rng):
    lat = tree(3, nus=(0.5,))
    xi, zeta = band(lat, rng)
    Y = g_expectation(lat, LinearDriver(0.3, (0.2,), 1.0, lat.marks), StoppingRule.at_root(), StoppingRule.at_horizon(), xi, zeta)
    assert Y[0] == xi[0]


def test_minimizer_stop_at_root_pays_upper(rng):
    lat = tree(3, nus=(0.5,))
    xi, zeta = band(lat, rng)
    Y = g_expectation(lat, ZeroDriver(lat.marks), StoppingRule.at_horizon(), StoppingRule.at_root(), xi, zeta)
    assert Y[0] == zeta[0]


def test_both_at_root_pays_lower(rng):
    lat = tree(2)
    xi, zeta = band(lat, rng)
    Y = g_expectation(lat, ZeroDriver(lat.marks), StoppingRule.at_root(), StoppingRule.at_root(), xi, zeta)
    assert Y[0] == xi[0]


def test_zero_driver_is_linear_expectation(rng):
    lat = tree(3, nus=(0.5, 0.3))
    xi, zeta = band(lat, rng)
    Y = g_expectation(lat, ZeroDriver(lat.marks), StoppingRule.at_horizon(), StoppingRule.at_horizon(), xi, zeta)
    leaves = lat.nodes(3)
    weights = np.ones(len(leaves))
    for node_i, leaf in enumerate(leaves):
        n = leaf
        while lat.parent[n] >= 0:
            weights[node_i] *= lat.prob[lat.branch[n]]
            n = lat.parent[n]
    assert Y[0] == pytest.approx(weights @ xi[leaves], abs=1e-13)


def test_nodes_after_cut_are_undefined(rng):
    lat = tree(2)
    stop = np.zeros(lat.n_nodes, dtype=bool)
    stop[1] = True
    sol = solve_bsde(lat, ZeroDriver(), rng.normal(size=lat.n_nodes), stop)
    kids = lat.children[1][0]
    assert np.all(np.isnan(sol.Y[kids]))
    assert np.all(np.isfinite(sol.Y[lat.children[1][1]]))


def test_canonical_rule_drops_shadowed_and_terminal_nodes():
    lat = tree(2)
    kid = int(lat.children[1][0, 0])
    rule = StoppingRule([1, kid, 2, lat.n_nodes - 1]).canonical(lat)
    assert rule.stop_set == frozenset([1, 2])


def test_payoff_prefers_lower_on_ties():
    lat = tree(1)
    xi = np.array([0.0, 1.0, 2.0])
    zeta = np.array([5.0, 1.0, 2.0])
    mask = np.array([True, False, False])
    stop, term = payoff_terminal(lat, mask, mask, xi, zeta)
    assert stop[0] and term[0] == 0.0


def test_projection_recovers_martingale_coefficients(rng):
    lat = tree(1, nus=(0.5, 0.2), T=0.5)
    a, z, k = 0.7, 1.3, np.array([0.4, -0.9])
    V = (a + z * lat.dW + lat.dNt @ k)[None, :]
    E, Z, K, r = project(lat, V)
    assert E[0] == pytest.approx(a)
    assert Z[0] == pytest.approx(z)
    np.testing.assert_allclose(K[0], k, atol=1e-12)
    assert r[0] < 1e-12


def test_density_matches_covariances():
    lat = tree(1, nus=(0.5, 0.7), T=0.4)
    L = density_weights(lat, 0.3, np.array([0.4, -0.2]))
    p = lat.prob
    assert p @ L == pytest.approx(1.0)
    assert (p * L) @ lat.dW == pytest.approx(0.3 * lat.dt)
    np.testing.assert_allclose((p * L) @ lat.dNt, np.array([0.4, -0.2]) * lat.marks.nu * lat.dt, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    N=st.integers(1, 3),
    m=st.integers(0, 2),
    beta=st.floats(-1, 1),
    theta=st.floats(-0.5, 0.5),
)
def test_linear_driver_matches_change_of_measure(seed, N, m, beta, theta):
    rng = np.random.default_rng(seed)
    lat = tree(N, nus=(0.3,) * m)
    gamma = rng.uniform(-0.5, 0.5, m)
    c = float(rng.normal())
    xi, zeta = band(lat, rng)
    stop = (rng.random(lat.n_nodes) < 0.3) & ~lat.is_terminal
    stop[0] = False
    tau = StoppingRule.from_mask(stop)
    drv = LinearDriver(beta, tuple(gamma), c, lat.marks, theta=theta)
    val = g_expectation(lat, drv, tau, StoppingRule.at_horizon(), xi, zeta)[0]
    s, term = payoff_terminal(lat, tau.mask(lat), lat.is_terminal, xi, zeta)
    ref = change_of_measure_value(lat, beta, theta, gamma, c, term, s)
    assert val == pytest.approx(ref, abs=1e-10)
