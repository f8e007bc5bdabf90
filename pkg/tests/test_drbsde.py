import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynkin.drbsde import (
    accumulate_predictable,
    canonical_decomposition,
    e_doob_meyer,
    is_e_supermartingale,
    is_supermartingale,
    mokobodski_witnesses,
    snell_envelope,
    solve_drbsde_dp,
    solve_drbsde_picard,
    solve_snell_system,
)
from dynkin.drivers import LinearDriver, ProcessDriver, ZeroDriver
from dynkin.errors import ObstacleOrderViolation
from dynkin.expectation import solve_bsde
from dynkin.instances import random_driver, random_problem

from conftest import tree


@pytest.fixture
def one_step():
    lat = tree(1)
    xi = np.array([0.0, 0.5, 0.1])
    zeta = np.array([0.25, 0.5, 0.1])
    return lat, xi, zeta


def test_one_step_upper_reflection(one_step):
    lat, xi, zeta = one_step
    sol = solve_drbsde_dp(lat, ZeroDriver(), xi, zeta)
    assert sol.Y[0] == pytest.approx(0.25)
    assert sol.dAp[0] == pytest.approx(0.05)
    assert sol.dA[0] == 0.0


def test_one_step_witnesses(one_step):
    lat, xi, zeta = one_step
    H, Hp = mokobodski_witnesses(lat, np.zeros(3), xi, zeta)
    assert H[0] == pytest.approx(0.0)
    assert Hp[0] == pytest.approx(0.05)


def test_one_step_game_value():
    lat = tree(1)
    sol = solve_drbsde_dp(lat, ZeroDriver(), np.array([0.0, 0.5, 0.1]), np.array([1.0, 0.5, 0.1]))
    assert sol.Y[0] == pytest.approx(np.median([0.0, 0.3, 1.0]))


def test_canonical_decomposition_example():
    d = canonical_decomposition([1.0, -2.0, 3.0])
    np.testing.assert_allclose(d.dA, [1, 0, 3])
    np.testing.assert_allclose(d.dAp, [0, 2, 0])
    np.testing.assert_allclose(d.A - d.Ap, np.cumsum([1.0, -2.0, 3.0]))
    # any other split B - B' of the same increments dominates
    B, Bp = np.array([1.0, 1.0, 3.0]), np.array([0.0, 3.0, 0.0])
    assert np.all(np.cumsum(B) >= d.A) and np.all(np.cumsum(Bp) >= d.Ap)


@settings(max_examples=40, deadline=None)
@given(inc=st.lists(st.floats(-10, 10), min_size=1, max_size=20), extra=st.lists(st.floats(0, 5), min_size=20, max_size=20))
def test_canonical_split_is_minimal(inc, extra):
    d = canonical_decomposition(inc)
    assert np.all(d.dA * d.dAp == 0)
    e = np.array(extra[: len(inc)])
    B = d.dA + e
    Bp = d.dAp + e
    assert np.all(np.cumsum(B) >= d.A - 1e-12) and np.all(np.cumsum(Bp) >= d.Ap - 1e-12)


def test_crossed_obstacles_rejected():
    lat = tree(1)
    with pytest.raises(ObstacleOrderViolation):
        solve_drbsde_dp(lat, ZeroDriver(), np.array([2.0, 0, 0]), np.array([1.0, 0, 0]))


def test_infinite_band_is_plain_bsde(rng):
    lat = tree(3, nus=(0.5,))
    term = rng.normal(size=lat.n_nodes)
    inf = np.where(lat.is_terminal, term, np.inf)
    g = LinearDriver(0.3, (0.2,), 0.5, lat.marks, theta=0.1)
    sol = solve_drbsde_dp(lat, g, np.where(lat.is_terminal, term, -np.inf), inf)
    np.testing.assert_allclose(sol.Y, solve_bsde(lat, g, term).Y, atol=1e-13)
    assert not sol.dA.any() and not sol.dAp.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_invariants_on_random_problems(seed):
    pr = random_problem(np.random.default_rng(seed), N_max=5, m_max=2)
    sol = solve_drbsde_dp(pr.lattice, pr.driver, pr.xi, pr.zeta)
    assert sol.invariant_violations() == {k: 0 for k in sol.invariant_violations()}
    assert sol.dynamics_residual() < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_picard_matches_dp(seed):
    pr = random_problem(np.random.default_rng(seed), N_max=5, m_max=2)
    dp = solve_drbsde_dp(pr.lattice, pr.driver, pr.xi, pr.zeta)
    pic = solve_drbsde_picard(pr.lattice, pr.driver, pr.xi, pr.zeta)
    assert np.max(np.abs(pic.Y - dp.Y)) <= 1e-10
    assert pic.sweeps <= 60


def test_picard_one_sweep_for_fixed_process(rng):
    lat = tree(3, nus=(0.5,))
    g = ProcessDriver(rng.normal(size=lat.n_nodes), lat.marks)
    xi = rng.normal(size=lat.n_nodes)
    pic = solve_drbsde_picard(lat, g, xi, np.where(lat.is_terminal, xi, xi + 1))
    assert pic.sweeps == 1


def test_predictable_accumulation():
    lat = tree(2)
    inc = np.arange(lat.n_nodes, dtype=float)
    A = accumulate_predictable(lat, inc)
    assert A[0] == 0
    leaf = lat.children[1][1, 0]
    assert A[leaf] == inc[0] + inc[2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_snell_reconstruction(seed):
    rng = np.random.default_rng(seed)
    pr = random_problem(rng, N_max=5, m_max=2, kind="process")
    lat, g = pr.lattice, pr.driver.values
    pair = solve_snell_system(lat, g, pr.xi, pr.zeta)
    sol = solve_drbsde_dp(lat, pr.driver, pr.xi, pr.zeta)
    np.testing.assert_allclose(pair.Y, sol.Y, atol=1e-10)
    for (J0, Jp0), (J1, Jp1) in zip(pair.history, pair.history[1:]):
        assert np.all(J1 >= J0) and np.all(Jp1 >= Jp0)
    H, Hp = mokobodski_witnesses(lat, g, pr.xi, pr.zeta, sol)
    assert np.all(H >= -1e-12) and np.all(Hp >= -1e-12)
    assert is_supermartingale(lat, H) and is_supermartingale(lat, Hp)
    assert np.all(pair.xi_t <= H - Hp + 1e-10) and np.all(H - Hp <= pair.zeta_t + 1e-10)


def test_snell_envelope_dominates_and_is_smallest(rng):
    lat = tree(3, nus=(0.4,))
    phi = rng.normal(size=lat.n_nodes)
    R = snell_envelope(lat, phi)
    assert np.all(R >= phi) and is_supermartingale(lat, R)
    # stopping at the first contact attains R at the root
    stop = np.isclose(R, phi)
    assert solve_bsde(lat, ZeroDriver(lat.marks), phi, stop).Y[0] == pytest.approx(R[0])


def test_e_doob_meyer_of_drbsde_value(rng):
    pr = random_problem(rng, N_max=4, m_max=1)
    lat = pr.lattice
    # one-sided problem: the value is an E-supermartingale
    zeta = np.where(lat.is_terminal, pr.xi, np.inf)
    sol = solve_drbsde_dp(lat, pr.driver, pr.xi, zeta)
    assert is_e_supermartingale(lat, pr.driver, sol.Y)
    dm = e_doob_meyer(lat, pr.driver, sol.Y)
    np.testing.assert_allclose(dm.Y, sol.Y, atol=1e-12)
    assert np.all(dm.dA >= 0) and not dm.dAp.any()


def test_random_driver_kinds_pass_scheme_check(rng):
    lat = tree(3, nus=(0.5, 0.5))
    for kind in ("linear", "smooth", "k-positive-part", "affine-y", "process"):
        g = random_driver(rng, lat, kind)
        assert g.lipschitz_C * lat.dt <= 0.5 + 1e-12
