"""Backward BSDE engine and g-conditional expectations on lattices.

At a non-terminal node with child values ``v_j`` the step reads

    a, Z, k = least-squares coefficients of v on [1, dW, dN~_1..dN~_m]
    Y = E[v] + g(t, Y, Z, k) dt

implicit in ``Y`` and explicit in ``(Z, k)``.  On default trees the basis has
as many elements as there are branches, so the projection interpolates the
child values exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .drivers import Driver
from .errors import ConfigError, NonConvergence, StepContractionViolated
from .model import Lattice

FP_TOL = 1e-12
FP_MAXITER = 200


@dataclass
class BsdeSolution:
    Y: np.ndarray
    Z: np.ndarray
    k: np.ndarray
    residual: np.ndarray
    active: np.ndarray
    cut: np.ndarray

    @property
    def root(self) -> float:
        return float(self.Y[0])


def check_step_contraction(lattice: Lattice, driver: Driver):
    C = driver.lipschitz_C
    if C * lattice.dt >= 1.0:
        raise StepContractionViolated(f"C*dt = {C * lattice.dt:g} >= 1; refine the time grid")


def project(lattice: Lattice, V: np.ndarray):
    """Return ``(E, Z, k, residual)`` for child-value rows ``V`` of shape ``(n, b)``."""
    coef = V @ lattice.projector.T
    fitted = coef @ lattice.basis.T
    resid = np.sqrt(((V - fitted) ** 2) @ lattice.prob)
    E = V @ lattice.prob
    return E, coef[:, 1], coef[:, 2:], resid


def implicit_step(driver: Driver, t: float, E, Z, k, dt, nodes=None, x=None):
    """Solve ``Y = E + g(t, Y, Z, k) dt`` by fixed-point iteration."""
    Y = E.copy()
    if not driver.depends_on_solution or driver.y_lip == 0.0:
        return E + driver(t, Y, Z, k, nodes, x) * dt
    for _ in range(FP_MAXITER):
        Y_new = E + driver(t, Y, Z, k, nodes, x) * dt
        if np.all(np.abs(Y_new - Y) <= FP_TOL * np.maximum(1.0, np.abs(Y_new))):
            return Y_new
        Y = Y_new
    raise NonConvergence(f"implicit step did not converge in {FP_MAXITER} iterations")


def reachable(lattice: Lattice, stop_mask: np.ndarray) -> np.ndarray:
    """Nodes reached before or at the first stop along some path."""
    active = np.zeros(lattice.n_nodes, dtype=bool)
    active[0] = True
    for n in range(lattice.N):
        idx = lattice.nodes(n)
        go = active[idx] & ~stop_mask[idx]
        active[lattice.children[n][go].ravel()] = True
    return active


def solve_bsde(
    lattice: Lattice,
    driver: Driver,
    terminal: np.ndarray,
    stop_mask: Optional[np.ndarray] = None,
) -> BsdeSolution:
    """Backward induction with terminal data on the first-hit cut of ``stop_mask``.

    Terminal nodes always belong to the cut.  Nodes strictly after the cut are
    left as NaN.
    """
    check_step_contraction(lattice, driver)
    n_nodes = lattice.n_nodes
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (n_nodes,):
        raise ConfigError("terminal values must be given per node")
    stop = lattice.is_terminal.copy()
    if stop_mask is not None:
        stop |= np.asarray(stop_mask, dtype=bool)
    active = reachable(lattice, stop)
    cut = active & stop
    Y = np.full(n_nodes, np.nan)
    Z = np.full(n_nodes, np.nan)
    k = np.full((n_nodes, lattice.m), np.nan)
    resid = np.zeros(n_nodes)
    Y[cut] = terminal[cut]
    t_grid = lattice.grid.times
    for n in range(lattice.N - 1, -1, -1):
        idx = lattice.nodes(n)
        work = active[idx] & ~stop[idx]
        if not np.any(work):
            continue
        nodes = idx[work]
        V = Y[lattice.children[n][work]]
        E, Zn, kn, rn = project(lattice, V)
        Y[nodes] = implicit_step(driver, t_grid[n], E, Zn, kn, lattice.dt, nodes, lattice.state[nodes])
        Z[nodes] = Zn
        k[nodes] = kn
        resid[nodes] = rn
    return BsdeSolution(Y, Z, k, resid, active, cut)


@dataclass(frozen=True)
class StoppingRule:
    """An adapted stopping time given by its stop set (first hit along each path)."""

    stop_set: frozenset

    def __init__(self, stop_set: Iterable[int] = ()):
        object.__setattr__(self, "stop_set", frozenset(int(s) for s in stop_set))

    def mask(self, lattice: Lattice) -> np.ndarray:
        m = lattice.is_terminal.copy()
        if self.stop_set:
            m[np.fromiter(self.stop_set, dtype=np.int64)] = True
        return m

    def canonical(self, lattice: Lattice) -> "StoppingRule":
        """Drop terminal nodes and nodes shadowed by an earlier stop."""
        m = np.zeros(lattice.n_nodes, dtype=bool)
        if self.stop_set:
            m[np.fromiter(self.stop_set, dtype=np.int64)] = True
        m &= ~lattice.is_terminal
        active = reachable(lattice, m | lattice.is_terminal)
        return StoppingRule(np.nonzero(m & active)[0].tolist())

    def stop_node(self, lattice: Lattice, path) -> int:
        m = self.mask(lattice)
        for node in path:
            if m[node]:
                return int(node)
        raise AssertionError("path does not reach a terminal node")

    @classmethod
    def at_root(cls) -> "StoppingRule":
        return cls([0])

    @classmethod
    def at_horizon(cls) -> "StoppingRule":
        return cls([])

    @classmethod
    def from_mask(cls, mask) -> "StoppingRule":
        return cls(np.nonzero(np.asarray(mask, dtype=bool))[0].tolist())


def payoff_terminal(lattice: Lattice, tau_mask, sigma_mask, xi, zeta):
    """Stop mask and terminal payoff of ``I(tau, sigma)`` on the joint cut."""
    tau_mask = np.asarray(tau_mask, dtype=bool) | lattice.is_terminal
    sigma_mask = np.asarray(sigma_mask, dtype=bool) | lattice.is_terminal
    stop = tau_mask | sigma_mask
    # where both rules first-hit the same node, tau <= sigma and xi is paid
    terminal = np.where(tau_mask, xi, zeta)
    return stop, terminal


def g_expectation(
    lattice: Lattice,
    driver: Driver,
    rule_tau: StoppingRule,
    rule_sigma: StoppingRule,
    xi: np.ndarray,
    zeta: np.ndarray,
) -> np.ndarray:
    """``E_{t, tau^sigma}(xi_tau 1{tau<=sigma} + zeta_sigma 1{sigma<tau})`` per node."""
    stop, terminal = payoff_terminal(lattice, rule_tau.mask(lattice), rule_sigma.mask(lattice), xi, zeta)
    return solve_bsde(lattice, driver, terminal, stop).Y


# ---------------------------------------------------------------------------
# change-of-measure oracle for linear drivers


def density_weights(lattice: Lattice, theta: float, gamma) -> np.ndarray:
    """Branch weights ``L_j`` of the one-step density for a linear driver.

    ``L = 1 + theta dW + sum_i phi_i dN~_i`` with ``phi`` chosen so that
    ``E[L dW] = theta dt`` and ``E[L dN~_i] = gamma_i nu_i dt``.
    """
    dt = lattice.dt
    nu = lattice.marks.nu
    m = lattice.m
    L = 1.0 + theta * lattice.dW
    if m:
        lam = nu * dt
        cov = np.diag(lam) - np.outer(lam, lam)
        phi = np.linalg.solve(cov, np.asarray(gamma, dtype=float) * lam)
        L = L + lattice.dNt @ phi
    return L


def change_of_measure_value(
    lattice: Lattice,
    beta,
    theta,
    gamma,
    c,
    terminal: np.ndarray,
    stop_mask: Optional[np.ndarray] = None,
    node: int = 0,
) -> float:
    """Evaluate ``E_Q[sum (prod D) c dt + (prod D) eta]`` by forward path enumeration.

    Coefficients are per-node arrays (scalars broadcast).  ``D = 1/(1 - beta dt)``
    is the one-step discount and ``Q`` reweights branch ``j`` by ``p_j L_j``.
    """
    n_nodes = lattice.n_nodes
    m = lattice.m
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (n_nodes,))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (n_nodes,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float).reshape(-1, m) if m else np.zeros((1, 0)), (n_nodes, m))
    c = np.broadcast_to(np.asarray(c, dtype=float), (n_nodes,))
    stop = lattice.is_terminal.copy()
    if stop_mask is not None:
        stop |= np.asarray(stop_mask, dtype=bool)
    dt = lattice.dt
    if lattice.kind != "tree":
        raise ConfigError("path enumeration requires a non-recombining tree")
    total = 0.0
    # forward enumeration of truncated paths: (node, Q-weight, discount, running sum)
    stack = [(int(node), 1.0, 1.0, 0.0)]
    while stack:
        a, weight, disc, acc = stack.pop()
        if stop[a]:
            total += weight * (acc + disc * terminal[a])
            continue
        lvl = int(lattice.level[a])
        disc_next = disc / (1.0 - beta[a] * dt)
        acc_next = acc + disc_next * c[a] * dt
        q = lattice.prob * density_weights(lattice, theta[a], gamma[a])
        for j, child in enumerate(lattice.children[lvl][a - lattice.offsets[lvl]]):
            stack.append((int(child), weight * q[j], disc_next, acc_next))
    return float(total)
