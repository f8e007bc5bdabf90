import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynkin.errors import CflViolated, ConfigError
from dynkin.model import MarkSpace
from dynkin.pide import (
    LABEL_INTERIOR,
    LABEL_LOWER,
    LABEL_UPPER,
    PideDriver,
    PideGrid,
    PideProblem,
    SdeSpec,
    check_discrete_comparison_principle,
    check_terminal_monotonicity,
    crossvalidate_markovian,
    discretize_operators,
    problem_from_config,
    solve_pidvi,
)


def const(v):
    return lambda t, x: np.full(np.shape(x), float(v))


def heat(terminal, lo=-50.0, hi=50.0, marks=MarkSpace.none(), driver=PideDriver(), T=1.0):
    return PideProblem(SdeSpec(marks), const(lo), const(hi), terminal, T, driver)


def test_heat_stencil_weights():
    grid = PideGrid(-1.0, 1.0, 21)
    st_ = discretize_operators(heat(np.tanh), grid)
    dt = 0.004
    j = 10
    w = (dt * st_.lower[j], 1 + dt * st_.center[j], dt * st_.upper[j])
    np.testing.assert_allclose(w, (0.2, 0.6, 0.2))


def test_on_grid_jump_destination():
    grid = PideGrid(-2.0, 2.0, 41)
    st_ = discretize_operators(heat(np.tanh, marks=MarkSpace((0.3,), (0.5,))), grid)
    j = 10
    assert st_.jump_left[0, j] == j + 3
    assert st_.jump_wl[0, j] == pytest.approx(1.0)
    u = grid.x**2
    assert st_.jump_value(u, 0)[j] == pytest.approx((grid.x[j] + 0.3) ** 2)


def test_off_grid_jump_interpolates_linearly():
    grid = PideGrid(-2.0, 2.0, 41)
    st_ = discretize_operators(heat(np.tanh, marks=MarkSpace((0.25,), (0.5,))), grid)
    u = 3.0 * grid.x + 1.0
    np.testing.assert_allclose(st_.jump_value(u, 0)[:30], 3.0 * (grid.x[:30] + 0.25) + 1.0, atol=1e-12)


def test_cfl_violation():
    grid = PideGrid(-1.0, 1.0, 21, N_t=10)
    with pytest.raises(CflViolated):
        solve_pidvi(heat(np.tanh), grid)
    with pytest.raises(CflViolated):
        discretize_operators(heat(np.tanh), grid, dt=0.1)


def test_gaussian_closed_form():
    w = 0.7
    prob = heat(lambda x: np.exp(-x**2 / (2 * w * w)))
    errs = []
    for M in (81, 161):
        sol = solve_pidvi(prob, PideGrid(-8.0, 8.0, M))
        s2 = w * w + 1.0
        exact = w / np.sqrt(s2) * np.exp(-sol.x**2 / (2 * s2))
        errs.append(np.max(np.abs(sol.u[0] - exact)))
    assert errs[0] < 5e-3
    assert errs[1] < errs[0] / 2


def test_equal_obstacles_pin_solution():
    prob = PideProblem(SdeSpec(), const(0.4), const(0.4), lambda x: np.full(np.shape(x), 0.4), 0.5)
    sol = solve_pidvi(prob, PideGrid(-3.0, 3.0, 61))
    np.testing.assert_allclose(sol.u, 0.4)


def test_regime_labels():
    # obstacles pinch towards the terminal value on the outer flanks
    lo = lambda t, x: np.where(x > 1.0, 0.29, -0.3)
    hi = lambda t, x: np.where(x < -1.0, -0.29, 0.3)
    prob = PideProblem(SdeSpec(), lo, hi, lambda x: np.clip(np.tanh(x), -0.3, 0.3), 1.0)
    sol = solve_pidvi(prob, PideGrid(-4.0, 4.0, 81))
    assert np.all(sol.u >= lo(0, sol.x) - 1e-15) and np.all(sol.u <= hi(0, sol.x) + 1e-15)
    labels = set(np.unique(sol.labels[:-1]).tolist())
    assert {LABEL_LOWER, LABEL_UPPER, LABEL_INTERIOR} <= labels


def test_terminal_outside_band_rejected():
    with pytest.raises(ConfigError):
        solve_pidvi(heat(lambda x: 2.0 + 0 * x, lo=-1, hi=1), PideGrid(-1.0, 1.0, 11))


def test_negative_q_coefficient_rejected():
    with pytest.raises(ConfigError):
        PideDriver(q_coef=-0.1)


JUMPY = PideProblem(
    SdeSpec(MarkSpace((0.4, -0.3), (0.5, 0.8))),
    lambda t, x: -0.6 + 0.1 * x,
    lambda t, x: 0.7 + 0.1 * x,
    lambda x: 0.5 * np.tanh(x),
    1.0,
    PideDriver(0.3, 0.2, 0.5, 0.1),
    1.0,
)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_discrete_comparison_principle(seed):
    rng = np.random.default_rng(seed)
    grid = PideGrid(-4.0, 4.0, 41)
    p = rng.exponential(0.2, size=grid.M)
    assert check_discrete_comparison_principle(JUMPY, grid, p)["ok"]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_terminal_monotonicity(seed):
    rng = np.random.default_rng(seed)
    grid = PideGrid(-4.0, 4.0, 41)
    x = grid.x
    room = (0.7 + 0.1 * x) - 0.5 * np.tanh(x)
    bump = room * rng.uniform(0, 1, grid.M)
    assert check_terminal_monotonicity(JUMPY, grid, bump)["ok"]


def test_crossvalidation_small():
    prob = PideProblem(SdeSpec(), const(-1.0), const(1.0), np.tanh, 1.0)
    rep = crossvalidate_markovian(prob, 32, PideGrid(-6.0, 6.0, 100), xs=(0.0, 0.5))
    assert rep["max_gap"] < 5e-3


def test_config_parsing():
    cfg = {
        "marks": [{"e": 0.5, "nu": 0.5}],
        "driver": {"y": 0.1, "q": 0.2},
        "h1": -1.0,
        "h2": {"kind": "const", "value": 1.0},
        "terminal": {"kind": "tanh"},
        "grid": {"M": 50},
        "lattice_N": 16,
        "x_points": [0.0, 0.5],
    }
    prob, grid, N, xs = problem_from_config(cfg)
    assert grid.M == 50 and N == 16 and xs == [0.0, 0.5]
    assert prob.sde.marks.m == 1
    with pytest.raises(ConfigError):
        problem_from_config({"h1": -1.0})
