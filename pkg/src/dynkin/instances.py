"""Random admissible instances for harnesses and property tests.

Drivers are drawn so that ``C * dt <= 0.5`` and ``C <= 1``, jump slopes stay
strictly above -1, and the one-step scheme is monotone in child values.
"""
from __future__ import annotations

import math

import numpy as np

from .configs import Problem
from .drivers import (
    Driver,
    LinearDriver,
    PositivePartDriver,
    ProcessDriver,
    ShiftedDriver,
    SmoothDriver,
    check_scheme_monotonicity,
)
from .errors import MonotonicityViolated
from .model import MarkSpace, TimeGrid, build_tree

DRIVER_KINDS = ("linear", "smooth", "k-positive-part", "affine-y")


def random_model(rng: np.random.Generator, N_max: int, m_max: int, T_max: float = 1.0, mass: float = 0.5) -> dict:
    N = int(rng.integers(1, N_max + 1))
    m = int(rng.integers(0, m_max + 1))
    T = float(rng.uniform(0.25, T_max))
    dt = T / N
    nu = rng.uniform(0.2, 1.5, m)
    if m and nu.sum() * dt > mass:
        nu *= mass / (nu.sum() * dt)
    e = rng.uniform(-1.0, 1.0, m)
    return {"T": T, "N": N, "marks": [{"e": float(a), "nu": float(b)} for a, b in zip(e, nu)], "kind": "tree"}


def model_of(lattice) -> dict:
    marks = [{"e": e, "nu": w} for e, w in zip(lattice.marks.atoms, lattice.marks.weights)]
    return {"T": lattice.grid.T, "N": lattice.N, "marks": marks, "kind": lattice.kind}


def random_obstacles(rng: np.random.Generator, lattice, width: float = 0.6, spread: float = 1.0):
    """Node-wise random band ``xi <= zeta`` that coincides at the horizon."""
    n = lattice.n_nodes
    base = spread * rng.normal(size=n) + 0.5 * np.tanh(lattice.state)
    xi = base - width * rng.exponential(size=n)
    zeta = base + width * rng.exponential(size=n)
    # some nodes get a degenerate band or a one-sided band
    pinch = rng.random(n) < 0.1
    zeta[pinch] = xi[pinch]
    term = lattice.is_terminal
    xi[term] = base[term]
    zeta[term] = base[term]
    return xi, zeta


def _z_cap(lattice) -> float:
    # |theta| below this keeps the up/down branch weights comfortably positive
    lam = float(np.sum(lattice.marks.nu) * lattice.dt)
    return 0.5 * math.sqrt((1.0 - lam) / lattice.dt) * (1.0 - lam)


def random_driver(rng: np.random.Generator, lattice, kind: str = None, C_max: float = 1.0) -> Driver:
    """Random driver with ``C <= min(C_max, 0.5/dt)`` that passes both monotonicity checks."""
    marks = lattice.marks
    C = min(C_max, 0.5 / lattice.dt)
    mass = math.sqrt(float(np.sum(marks.nu))) if marks.m else 0.0
    kind = kind or DRIVER_KINDS[int(rng.integers(len(DRIVER_KINDS)))]
    zc = min(C, _z_cap(lattice))
    for _ in range(50):
        if kind == "linear":
            gamma = rng.uniform(-0.9, 1.0, marks.m)
            norm = math.sqrt(float(np.sum(gamma**2 * marks.nu))) if marks.m else 0.0
            if norm > C:
                gamma *= C / norm
            drv = LinearDriver(C * rng.uniform(-1, 1), tuple(gamma), float(rng.normal()), marks,
                               theta=zc * rng.uniform(-1, 1))
        elif kind == "smooth":
            cmax = min(0.9, C / mass) if mass else 0.0
            drv = SmoothDriver(C * rng.uniform(-1, 1), zc * rng.uniform(-1, 1), cmax * rng.uniform(-1, 1),
                               float(rng.normal()), marks)
        elif kind == "k-positive-part":
            s = min(1.0, C / mass) * rng.uniform(0, 1) if mass else 1.0
            drv = PositivePartDriver(s, marks)
        elif kind == "affine-y":
            drv = ShiftedDriver(LinearDriver(C * rng.uniform(-1, 1), (0.0,) * marks.m, 0.0, marks), float(rng.normal()), marks)
        elif kind == "process":
            drv = ProcessDriver(rng.normal(size=lattice.n_nodes), marks)
        else:
            raise ValueError(kind)
        try:
            check_scheme_monotonicity(lattice, drv)
        except MonotonicityViolated:
            zc *= 0.5
            continue
        return drv
    raise RuntimeError("could not draw a monotone driver")


def random_problem(rng, N_max=6, m_max=2, kind=None, T_max=1.0) -> Problem:
    model = random_model(rng, N_max, m_max, T_max)
    lattice = build_tree(TimeGrid(model["T"], model["N"]),
                         MarkSpace(tuple(mk["e"] for mk in model["marks"]), tuple(mk["nu"] for mk in model["marks"])))
    drv = random_driver(rng, lattice, kind)
    xi, zeta = random_obstacles(rng, lattice)
    return Problem(lattice, drv, xi, zeta, {"model": model})


def random_game_problem(rng, N_max=3, m_max=1, kind=None) -> Problem:
    """Brute-forceable instance: at most 22 interior nodes and a manageable pair count."""
    return random_problem(rng, N_max=N_max, m_max=m_max, kind=kind)


def ordered_pair(rng, N_max=6, m_max=2):
    """Random pair with ``g2 <= g1``, ``xi2 <= xi1``, ``zeta2 <= zeta1``."""
    from .analysis import ComparisonInstance

    pr = random_problem(rng, N_max, m_max)
    lat = pr.lattice
    n = lat.n_nodes
    term = lat.is_terminal
    g1 = ShiftedDriver(pr.driver, rng.exponential(0.3, n), lat.marks)
    xi1 = pr.xi + rng.exponential(0.2, n) * (rng.random(n) < 0.7)
    zeta1 = np.maximum(pr.zeta + rng.exponential(0.2, n) * (rng.random(n) < 0.7), xi1)
    zeta1[term] = xi1[term]
    return ComparisonInstance(lat, g1, xi1, zeta1, pr.driver, pr.xi, pr.zeta)


def perturbed_pair(rng, N_max=6, m_max=2, scale=0.3):
    """Two shifts of one base driver with independently perturbed obstacles."""
    from .analysis import ComparisonInstance

    pr = random_problem(rng, N_max, m_max)
    lat = pr.lattice
    n = lat.n_nodes
    term = lat.is_terminal
    g1 = ShiftedDriver(pr.driver, scale * rng.normal(size=n), lat.marks)
    g2 = ShiftedDriver(pr.driver, scale * rng.normal(size=n), lat.marks)
    xi2 = pr.xi + scale * rng.normal(size=n)
    zeta2 = np.maximum(pr.zeta + scale * rng.normal(size=n), xi2)
    zeta2[term] = xi2[term]
    cert = {"g": False, "xi": False, "zeta": False}
    return ComparisonInstance(lat, g1, pr.xi, pr.zeta, g2, xi2, zeta2, cert)


def random_mixed_game(rng: np.random.Generator, N_max: int = 2, m_max: int = 1, n_u: int = 2, n_v: int = 2):
    """Linear family ``F(u, v) = F_u + G_v`` with separable coefficients.

    Separability makes ``(u*, v*)`` a pure saddle of every pointwise control
    game, so the sup-inf and inf-sup drivers agree.
    Returns ``(lattice, MixedGameSpec, xi, zeta)``.
    """
    from .games import MixedGameSpec

    model = random_model(rng, N_max, m_max)
    lattice = build_tree(TimeGrid(model["T"], model["N"]),
                         MarkSpace(tuple(mk["e"] for mk in model["marks"]), tuple(mk["nu"] for mk in model["marks"])))
    marks = lattice.marks
    C = min(1.0, 0.5 / lattice.dt)
    zc = min(C, _z_cap(lattice)) / 2
    mass = math.sqrt(float(np.sum(marks.nu))) if marks.m else 1.0

    def part(count):
        return [(0.5 * C * rng.uniform(-1, 1), rng.uniform(-0.45, 0.5, marks.m) * min(1.0, 0.5 * C / mass),
                 float(rng.normal()), zc * rng.uniform(-1, 1)) for _ in range(count)]

    pu, pv = part(n_u), part(n_v)
    fam = tuple(
        tuple(LinearDriver(a[0] + b[0], tuple(a[1] + b[1]), a[2] + b[2], marks, theta=a[3] + b[3]) for b in pv)
        for a in pu
    )
    xi, zeta = random_obstacles(rng, lattice)
    return lattice, MixedGameSpec(fam), xi, zeta


def strict_comparison_instance(rng: np.random.Generator, N: int = 4, m: int = 1, big: float = 50.0):
    """Ordered pair whose first reflection happens on a known random cut.

    Before the cut both bands are wide.  At the cut the common upper obstacle
    is low enough to bind in both problems, so the values agree up to and
    including the cut.  Below the cut the first problem has a larger lower
    obstacle and a larger driver, so the values separate there.

    Returns ``(instance, cut_mask)``; ``cut_mask`` also marks the leaves of
    paths that never meet the cut.
    """
    from .analysis import ComparisonInstance

    model = {"T": 1.0, "N": N, "marks": [{"e": 0.3, "nu": 0.8}][:m], "kind": "tree"}
    marks = MarkSpace(tuple(mk["e"] for mk in model["marks"]), tuple(mk["nu"] for mk in model["marks"]))
    lattice = build_tree(TimeGrid(1.0, N), marks)
    # random cut: a canonical rule that continues at the root
    rules = [r for r in _sample_rules(rng, lattice) if 0 not in r.stop_set and r.stop_set]
    cut_rule = rules[int(rng.integers(len(rules)))]
    cut = np.zeros(lattice.n_nodes, dtype=bool)
    cut[list(cut_rule.stop_set)] = True
    after = np.zeros(lattice.n_nodes, dtype=bool)
    for n in range(N):
        idx = lattice.nodes(n)
        src = cut[idx] | after[idx]
        after[lattice.children[n][src].ravel()] = True
    term = lattice.is_terminal
    n_nodes = lattice.n_nodes
    xi2 = np.full(n_nodes, -big)
    zeta = np.full(n_nodes, big)
    low = rng.uniform(-1.0, 0.0, n_nodes)
    zeta[cut] = low[cut]
    high = rng.uniform(2.0, 3.0, n_nodes)
    xi2[after] = high[after]
    free_leaf = term & ~after
    xi2[free_leaf] = rng.normal(size=int(free_leaf.sum()))
    xi1 = xi2.copy()
    xi1[after] += rng.uniform(0.1, 0.5, int(after.sum()))
    zeta1 = np.where(term, xi1, zeta)
    zeta2 = np.where(term, xi2, zeta)
    base = LinearDriver(0.3, (0.5,) * m, 0.1, marks, theta=0.2)
    shift = np.where(after, rng.uniform(0.05, 0.3, n_nodes), 0.0)
    g1 = ShiftedDriver(base, shift, marks)
    g2 = ShiftedDriver(base, 0.0, marks)
    inst = ComparisonInstance(lattice, g1, xi1, zeta1, g2, xi2, zeta2)
    expected = cut.copy()
    reach = np.zeros(n_nodes, dtype=bool)
    reach[0] = True
    for n in range(N):
        idx = lattice.nodes(n)
        reach[lattice.children[n][reach[idx] & ~cut[idx]].ravel()] = True
    expected |= reach & term & ~after
    return inst, expected


def _sample_rules(rng, lattice, count: int = 64):
    """A few random canonical stopping rules (cheap even when enumeration is large)."""
    from .expectation import StoppingRule

    out = []
    for _ in range(count):
        p = rng.uniform(0.2, 0.6)
        mask = (rng.random(lattice.n_nodes) < p) & ~lattice.is_terminal
        out.append(StoppingRule.from_mask(mask).canonical(lattice))
    return out
