"""Comparison, strict comparison and a priori estimate harnesses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drbsde import solve_drbsde_dp
from .drivers import Driver, ShiftedDriver, check_monotonicity, sample_points
from .errors import ConfigError, HypothesisUnmet, MonotonicityViolated, OrderingCertificateFalse
from .model import Lattice, validate_obstacles


@dataclass(frozen=True)
class EstimateParams:
    C: float
    eta: float
    beta: float

    def __post_init__(self):
        if self.C <= 0 or self.eta <= 0 or self.beta <= 0:
            raise ConfigError("C, eta and beta must be positive")
        if self.eta > 1.0 / self.C**2 + 1e-15:
            raise ConfigError(f"eta = {self.eta} exceeds 1/C^2 = {1 / self.C**2}")
        if self.beta < 3.0 / self.eta + 2.0 * self.C - 1e-15:
            raise ConfigError(f"beta = {self.beta} is below 3/eta + 2C = {3 / self.eta + 2 * self.C}")


@dataclass
class ComparisonInstance:
    lattice: Lattice
    g1: Driver
    xi1: np.ndarray
    zeta1: np.ndarray
    g2: Driver
    xi2: np.ndarray
    zeta2: np.ndarray
    certificates: dict = field(default_factory=lambda: {"g": True, "xi": True, "zeta": True})

    def solve(self):
        s1 = solve_drbsde_dp(self.lattice, self.g1, self.xi1, self.zeta1)
        s2 = solve_drbsde_dp(self.lattice, self.g2, self.xi2, self.zeta2)
        return s1, s2


def verify_certificates(inst: ComparisonInstance, n_samples: int = 2000, seed: int = 0, tol: float = 1e-12):
    """Check the declared orderings ``g2 <= g1``, ``xi2 <= xi1``, ``zeta2 <= zeta1``."""
    lat = inst.lattice
    cert = inst.certificates
    if cert.get("xi", True) and np.any(inst.xi2 > inst.xi1 + tol):
        n = int(np.argmax(inst.xi2 - inst.xi1))
        raise OrderingCertificateFalse(f"xi2 > xi1 at node {n}")
    if cert.get("zeta", True) and np.any(inst.zeta2 > inst.zeta1 + tol):
        n = int(np.argmax(inst.zeta2 - inst.zeta1))
        raise OrderingCertificateFalse(f"zeta2 > zeta1 at node {n}")
    if cert.get("g", True):
        rng = np.random.default_rng(seed)
        s = sample_points(rng, n_samples, lat.m)
        nodes = rng.integers(0, lat.n_nodes, n_samples)
        d = inst.g1(s["t"], s["y"], s["z"], s["k1"], nodes) - inst.g2(s["t"], s["y"], s["z"], s["k1"], nodes)
        if np.any(d < -tol):
            j = int(np.argmin(d))
            raise OrderingCertificateFalse(f"g2 > g1 at sampled point {j} (by {-d[j]:g})")


def check_comparison(inst: ComparisonInstance, tol: float = 1e-10, verify: bool = True) -> dict:
    """Solve both problems and report ``max(Y2 - Y1)``."""
    if verify:
        verify_certificates(inst)
    s1, s2 = inst.solve()
    worst = float(np.max(s2.Y - s1.Y))
    return {"max_violation": worst, "ok": worst <= tol, "Y1_root": float(s1.Y[0]), "Y2_root": float(s2.Y[0])}


def first_increase_mask(lattice: Lattice, sols, S: int = 0) -> np.ndarray:
    """First node at or after ``S`` on each path where any reflection increment is positive.

    Paths without reflection end at their leaf.
    """
    hit = np.zeros(lattice.n_nodes, dtype=bool)
    for s in sols:
        hit |= (s.dA > 0) | (s.dAp > 0)
    hit |= lattice.is_terminal
    sub = lattice.subtree_mask(S)
    first = np.zeros(lattice.n_nodes, dtype=bool)
    before = np.zeros(lattice.n_nodes, dtype=bool)  # strictly before the first hit
    reach = np.zeros(lattice.n_nodes, dtype=bool)
    reach[S] = True
    for n in range(int(lattice.level[S]), lattice.N + 1):
        idx = lattice.nodes(n)
        r = reach[idx] & sub[idx]
        first[idx[r & hit[idx]]] = True
        go = r & ~hit[idx]
        before[idx[go]] = True
        if n < lattice.N:
            reach[lattice.children[n][go].ravel()] = True
    return first, before


def check_strict_comparison(
    inst: ComparisonInstance,
    S: int = 0,
    tol: float = 1e-12,
    n_samples: int = 500,
    seed: int = 0,
) -> dict:
    """Equality of ``Y1`` and ``Y2`` from ``S`` through the first reflection time."""
    lat = inst.lattice
    rng = np.random.default_rng(seed)
    samples = sample_points(rng, n_samples, lat.m)
    samples["nodes"] = rng.integers(0, lat.n_nodes, n_samples)
    try:
        w = check_monotonicity(inst.g1, samples)
    except MonotonicityViolated as exc:
        raise HypothesisUnmet(f"monotonicity witness unavailable: {exc}") from None
    if not w.strict:
        raise HypothesisUnmet("strict monotonicity (gamma > -1) fails for g1")
    s1, s2 = inst.solve()
    if abs(s1.Y[S] - s2.Y[S]) > tol * max(1.0, abs(s1.Y[S])):
        raise HypothesisUnmet(f"values differ at S: {s1.Y[S]!r} vs {s2.Y[S]!r}")
    first, before = first_increase_mask(lat, (s1, s2), S)
    closed = first | before
    scale = tol * np.maximum(1.0, np.abs(s1.Y))
    y_gap = np.abs(s1.Y - s2.Y)
    eq_ok = bool(np.all(y_gap[closed] <= scale[closed]))
    idx = np.nonzero(before)[0]
    t = lat.times[idx]
    g1 = inst.g1(t, s2.Y_pre[idx], s2.Z[idx], s2.k[idx], idx, lat.state[idx])
    g2 = inst.g2(t, s2.Y_pre[idx], s2.Z[idx], s2.k[idx], idx, lat.state[idx])
    drv_gap = float(np.max(np.abs(g1 - g2), initial=0.0))
    # sharpness: does equality break right after the first reflection?
    after = np.zeros(lat.n_nodes, dtype=bool)
    for n in range(lat.N):
        idx_n = lat.nodes(n)
        after[lat.children[n][first[idx_n]].ravel()] = True
    sharp = bool(np.any(y_gap[after] > scale[after])) if np.any(after) else False
    return {
        "theta_bar": np.nonzero(first)[0].tolist(),
        "equality_ok": eq_ok,
        "driver_gap": drv_gap,
        "driver_ok": drv_gap <= 1e-10,
        "max_gap_on_interval": float(np.max(y_gap[closed])),
        "breaks_after": sharp,
    }


# ---------------------------------------------------------------------------
# a priori estimates


def conditional_sup_expectation(lattice: Lattice, phi: np.ndarray) -> np.ndarray:
    """``E[sup_{s >= t} phi_s | F_t]`` at every node, using pathwise running maxima."""
    if lattice.kind != "tree":
        raise ConfigError("pathwise maxima need a non-recombining tree")
    out = np.empty(lattice.n_nodes)
    N = lattice.N
    idx = lattice.nodes(N)
    vals = phi[idx][:, None]
    wts = np.ones((len(idx), 1))
    out[idx] = phi[idx]
    b = lattice.branching
    for n in range(N - 1, -1, -1):
        idx = lattice.nodes(n)
        count = len(idx)
        vals = vals.reshape(count, -1)
        # children of a node are contiguous at the next level
        wts = (wts.reshape(count, b, -1) * lattice.prob[None, :, None]).reshape(count, -1)
        vals = np.maximum(vals, phi[idx][:, None])
        out[idx] = np.sum(vals * wts, axis=1)
    return out


def discounted_integral(lattice: Lattice, beta: float, h: np.ndarray) -> np.ndarray:
    """``E[sum_{s >= t} e^{beta (s - t)} h_s dt | F_t]`` with a left-point sum."""
    out = np.zeros(lattice.n_nodes)
    growth = np.exp(beta * lattice.dt)
    for n in range(lattice.N - 1, -1, -1):
        idx = lattice.nodes(n)
        out[idx] = h[idx] * lattice.dt + growth * lattice.expect(out, n)
    return out


def estimate_rhs(lattice, params: EstimateParams, dxi, dzeta, gbar):
    sup_part = conditional_sup_expectation(lattice, dxi**2) + conditional_sup_expectation(lattice, dzeta**2)
    T_rem = lattice.grid.T - lattice.times
    gb = np.where(lattice.is_terminal, 0.0, gbar**2)
    return np.exp(params.beta * T_rem) * sup_part + params.eta * discounted_integral(lattice, params.beta, gb)


def check_apriori_estimate(
    inst: ComparisonInstance,
    params: EstimateParams,
    gbar: Optional[np.ndarray] = None,
    tol: float = 1e-10,
) -> dict:
    """Both sides of the squared-difference bound at every node.

    ``gbar`` is the per-node sup of ``|g1 - g2|``; it is computed exactly when
    both drivers are shifts of the same base driver.
    """
    lat = inst.lattice
    if gbar is None:
        gbar = shift_gap(inst.g1, inst.g2, lat.n_nodes)
    s1, s2 = inst.solve()
    lhs = (s1.Y - s2.Y) ** 2
    rhs = estimate_rhs(lat, params, inst.xi1 - inst.xi2, inst.zeta1 - inst.zeta2, np.asarray(gbar, float))
    worst = float(np.max(lhs - rhs))
    return {
        "max_excess": worst,
        "ok": worst <= tol,
        "max_ratio": float(np.max(lhs / np.maximum(rhs, 1e-300))),
        "lhs_root": float(lhs[0]),
        "rhs_root": float(rhs[0]),
    }


def shift_gap(g1: Driver, g2: Driver, n_nodes: int) -> np.ndarray:
    """Exact ``sup |g1 - g2|`` per node for two shifts of one base driver."""
    def parts(g):
        if isinstance(g, ShiftedDriver):
            return g.base, np.broadcast_to(np.asarray(g.shift, dtype=float), (n_nodes,))
        return g, np.zeros(n_nodes)

    b1, s1 = parts(g1)
    b2, s2 = parts(g2)
    if b1 is not b2 and b1.to_config() != b2.to_config():
        raise ConfigError("exact driver gap needs two shifts of the same base driver")
    return np.abs(s1 - s2)


def check_single_bound(lattice: Lattice, driver: Driver, xi, zeta, params: EstimateParams, tol: float = 1e-10) -> dict:
    """Bound on ``Y^2`` alone (second problem identically zero)."""
    xi, zeta = validate_obstacles(lattice, xi, zeta)
    sol = solve_drbsde_dp(lattice, driver, xi, zeta)
    idx = np.arange(lattice.n_nodes)
    m = lattice.m
    g0 = driver(lattice.times, np.zeros(lattice.n_nodes), np.zeros(lattice.n_nodes), np.zeros((lattice.n_nodes, m)), idx, lattice.state)
    lhs = sol.Y**2
    rhs = estimate_rhs(lattice, params, xi, zeta, np.abs(g0))
    worst = float(np.max(lhs - rhs))
    return {"max_excess": worst, "ok": worst <= tol, "lhs_root": float(lhs[0]), "rhs_root": float(rhs[0])}
