"""Doubly reflected BSDEs on lattices.

The dynamic-programming solver reflects an implicit BSDE candidate into the
band ``[xi, zeta]`` node by node.  Reflection increments ``dA``/``dA'`` are
recorded at the node where they occur; the processes ``A``/``A'`` at a node sum
the increments of its strict ancestors, so they are predictable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drivers import Driver, ProcessDriver
from .errors import ConfigError, NonConvergence
from .expectation import check_step_contraction, implicit_step, project
from .io import write_csv
from .model import Lattice, validate_obstacles


@dataclass
class DrbsdeSolution:
    lattice: Lattice
    Y: np.ndarray
    Y_pre: np.ndarray  # unreflected candidate
    Z: np.ndarray
    k: np.ndarray
    dA: np.ndarray
    dAp: np.ndarray
    g: np.ndarray  # driver evaluated along the solution
    xi: np.ndarray
    zeta: np.ndarray
    sweeps: int = 0
    residual: float = 0.0

    @property
    def A(self) -> np.ndarray:
        return accumulate_predictable(self.lattice, self.dA)

    @property
    def Ap(self) -> np.ndarray:
        return accumulate_predictable(self.lattice, self.dAp)

    def dynamics_residual(self) -> float:
        """Max ``|Y - (E[Y_next] + g dt + dA - dA')|`` over non-terminal nodes."""
        lat = self.lattice
        worst = 0.0
        for n in range(lat.N):
            idx = lat.nodes(n)
            E = lat.expect(self.Y, n)
            r = self.Y[idx] - (E + self.g[idx] * lat.dt + self.dA[idx] - self.dAp[idx])
            worst = max(worst, float(np.max(np.abs(r))))
        return worst

    def invariant_violations(self, tol: float = 1e-10) -> dict:
        """Counts of Skorokhod, singularity and band violations (all should be 0)."""
        Y, xi, zeta = self.Y, self.xi, self.zeta
        term = self.lattice.is_terminal
        scale = tol * np.maximum(1.0, np.abs(Y))
        return {
            "singular": int(np.sum(self.dA * self.dAp != 0.0)),
            "skorokhod_lower": int(np.sum((self.dA > 0) & (np.abs(Y - xi) > scale))),
            "skorokhod_upper": int(np.sum((self.dAp > 0) & (np.abs(Y - zeta) > scale))),
            "band": int(np.sum((Y < xi - scale) | (Y > zeta + scale))),
            "terminal": int(np.sum(np.abs(Y[term] - xi[term]) > scale[term])),
            "negative_increment": int(np.sum((self.dA < 0) | (self.dAp < 0))),
            "dynamics": int(self.dynamics_residual() > tol),
        }

    def to_rows(self):
        lat = self.lattice
        for i in range(lat.n_nodes):
            row = [i, int(lat.level[i]), float(lat.times[i]), float(lat.state[i]), float(self.Y[i]),
                   float(self.Z[i])]
            row += [float(v) for v in self.k[i]]
            row += [float(self.dA[i]), float(self.dAp[i]), float(self.xi[i]), float(self.zeta[i])]
            yield row

    def header(self):
        return (["node", "level", "t", "x", "Y", "Z"] + [f"k{i + 1}" for i in range(self.lattice.m)]
                + ["dA", "dA_prime", "xi", "zeta"])

    def write_csv(self, path):
        write_csv(path, self.header(), self.to_rows())


def accumulate_predictable(lattice: Lattice, inc: np.ndarray) -> np.ndarray:
    """Sum of ``inc`` over strict ancestors (zero at the root)."""
    if lattice.kind != "tree":
        raise ConfigError("path functionals need a non-recombining tree")
    out = np.zeros(lattice.n_nodes)
    for n in range(lattice.N):
        idx = lattice.nodes(n)
        out[lattice.children[n]] = (out[idx] + inc[idx])[:, None]
    return out


def solve_drbsde_dp(lattice: Lattice, driver: Driver, xi, zeta) -> DrbsdeSolution:
    """Reflected backward induction: candidate step, then clamp into ``[xi, zeta]``."""
    xi, zeta = validate_obstacles(lattice, xi, zeta)
    check_step_contraction(lattice, driver)
    n_nodes = lattice.n_nodes
    Y = np.full(n_nodes, np.nan)
    Y_pre = np.full(n_nodes, np.nan)
    Z = np.full(n_nodes, np.nan)
    k = np.full((n_nodes, lattice.m), np.nan)
    dA = np.zeros(n_nodes)
    dAp = np.zeros(n_nodes)
    g = np.zeros(n_nodes)
    term = lattice.is_terminal
    Y[term] = xi[term]
    Y_pre[term] = xi[term]
    resid = 0.0
    t_grid = lattice.grid.times
    for n in range(lattice.N - 1, -1, -1):
        idx = lattice.nodes(n)
        E, Zn, kn, rn = project(lattice, Y[lattice.children[n]])
        x = lattice.state[idx]
        cand = implicit_step(driver, t_grid[n], E, Zn, kn, lattice.dt, idx, x)
        lifted = np.maximum(xi[idx], cand)
        Yn = np.minimum(zeta[idx], lifted)
        Y[idx] = Yn
        Y_pre[idx] = cand
        Z[idx] = Zn
        k[idx] = kn
        dA[idx] = lifted - cand
        dAp[idx] = lifted - Yn
        g[idx] = driver(t_grid[n], cand, Zn, kn, idx, x)
        resid = max(resid, float(np.max(rn, initial=0.0)))
    return DrbsdeSolution(lattice, Y, Y_pre, Z, k, dA, dAp, g, xi, zeta, residual=resid)


def solve_drbsde_picard(
    lattice: Lattice,
    driver: Driver,
    xi,
    zeta,
    tol: float = 1e-11,
    max_sweeps: int = 100,
) -> DrbsdeSolution:
    """Fixed point of ``(U, V, l) -> DRBSDE solution with frozen driver g(U, V, l)``.

    The frozen arguments are the previous candidate ``Y_pre`` and ``(Z, k)``.
    ``sweeps`` is the number of map applications after which the next one
    changed ``Y`` by less than ``tol``; a driver that ignores the solution
    therefore reports one sweep.
    """
    xi, zeta = validate_obstacles(lattice, xi, zeta)
    check_step_contraction(lattice, driver)
    n_nodes = lattice.n_nodes
    t = lattice.times
    x = lattice.state
    inner = ~lattice.is_terminal
    idx = np.nonzero(inner)[0]
    U = np.zeros(n_nodes)
    V = np.zeros(n_nodes)
    L = np.zeros((n_nodes, lattice.m))
    prev = None
    for sweep in range(1, max_sweeps + 2):
        vals = np.zeros(n_nodes)
        vals[idx] = _eval_by_time(driver, t, U, V, L, idx, x)
        sol = solve_drbsde_dp(lattice, ProcessDriver(vals, lattice.marks), xi, zeta)
        if prev is not None and np.max(np.abs(sol.Y - prev.Y)) < tol:
            prev.sweeps = sweep - 1
            prev.g = _driver_along(lattice, driver, prev)
            return prev
        prev = sol
        U = np.where(inner, sol.Y_pre, 0.0)
        V = np.where(inner, sol.Z, 0.0)
        L = np.where(inner[:, None], sol.k, 0.0)
    raise NonConvergence(f"Picard iteration did not settle within {max_sweeps} sweeps")


def _eval_by_time(driver, t, y, z, k, idx, x):
    out = np.empty(len(idx))
    times = t[idx]
    for tv in np.unique(times):
        sel = times == tv
        nodes = idx[sel]
        out[sel] = driver(float(tv), y[nodes], z[nodes], k[nodes], nodes, x[nodes])
    return out


def _driver_along(lattice, driver, sol):
    g = np.zeros(lattice.n_nodes)
    idx = np.nonzero(~lattice.is_terminal)[0]
    g[idx] = _eval_by_time(driver, lattice.times, sol.Y_pre, sol.Z, sol.k, idx, lattice.state)
    return g


# ---------------------------------------------------------------------------
# Snell-envelope system for driver processes


@dataclass
class SnellPair:
    J: np.ndarray
    Jp: np.ndarray
    Gamma: np.ndarray
    xi_t: np.ndarray
    zeta_t: np.ndarray
    iterations: int
    gap: float
    history: list = field(default_factory=list, repr=False)

    @property
    def Y(self) -> np.ndarray:
        return self.J - self.Jp + self.Gamma


def backward_accumulate(lattice: Lattice, terminal: np.ndarray, running: np.ndarray) -> np.ndarray:
    """``E[terminal_T + sum_{s>=t} running_s dt | F_t]`` by backward averaging."""
    out = np.array(terminal, dtype=float)
    for n in range(lattice.N - 1, -1, -1):
        idx = lattice.nodes(n)
        out[idx] = lattice.expect(out, n) + running[idx] * lattice.dt
    return out


def snell_envelope(lattice: Lattice, phi: np.ndarray) -> np.ndarray:
    """Smallest supermartingale dominating ``phi``."""
    R = np.array(phi, dtype=float)
    for n in range(lattice.N - 1, -1, -1):
        idx = lattice.nodes(n)
        R[idx] = np.maximum(phi[idx], lattice.expect(R, n))
    return R


def solve_snell_system(
    lattice: Lattice,
    g_process,
    xi,
    zeta,
    max_iter: int = 100_000,
    keep_history: bool = True,
) -> SnellPair:
    """Iterate ``J = R(J' + xi~)``, ``J' = R(J - zeta~)`` from zero until stationary."""
    xi, zeta = validate_obstacles(lattice, xi, zeta)
    g_process = np.asarray(g_process, dtype=float)
    term = lattice.is_terminal
    Gamma = backward_accumulate(lattice, np.where(term, xi, 0.0), np.where(term, 0.0, g_process))
    xi_t = xi - Gamma
    zeta_t = zeta - Gamma
    J = np.zeros(lattice.n_nodes)
    Jp = np.zeros(lattice.n_nodes)
    history = [(J, Jp)] if keep_history else []
    for it in range(1, max_iter + 1):
        J_new = snell_envelope(lattice, Jp + xi_t)
        Jp_new = snell_envelope(lattice, J - zeta_t)
        gap = float(max(np.max(np.abs(J_new - J)), np.max(np.abs(Jp_new - Jp))))
        if keep_history:
            history.append((J_new, Jp_new))
        if gap == 0.0:
            return SnellPair(J_new, Jp_new, Gamma, xi_t, zeta_t, it, gap, history)
        J, Jp = J_new, Jp_new
    raise NonConvergence(f"Snell iteration not stationary after {max_iter} rounds (gap {gap:g})")


def mokobodski_witnesses(lattice: Lattice, g_process, xi, zeta, solution: Optional[DrbsdeSolution] = None):
    """``H = E[A_T - A_t | F_t]`` and ``H' = E[A'_T - A'_t | F_t]``."""
    if solution is None:
        solution = solve_drbsde_dp(lattice, ProcessDriver(np.asarray(g_process, float), lattice.marks), xi, zeta)
    zero = np.zeros(lattice.n_nodes)
    # A_T - A_t collects the increments recorded at t and later
    H = backward_accumulate(lattice, zero, solution.dA / lattice.dt)
    Hp = backward_accumulate(lattice, zero, solution.dAp / lattice.dt)
    return H, Hp


def is_supermartingale(lattice: Lattice, H: np.ndarray, tol: float = 1e-12) -> bool:
    for n in range(lattice.N):
        idx = lattice.nodes(n)
        if np.any(lattice.expect(H, n) > H[idx] + tol * np.maximum(1.0, np.abs(H[idx]))):
            return False
    return True


# ---------------------------------------------------------------------------
# finite-variation decomposition and E-supermartingales


@dataclass
class FvDecomposition:
    dA: np.ndarray
    dAp: np.ndarray

    @property
    def A(self):
        return np.cumsum(self.dA, axis=-1)

    @property
    def Ap(self):
        return np.cumsum(self.dAp, axis=-1)


def canonical_decomposition(d_alpha) -> FvDecomposition:
    """Jordan split of increments: ``dA = (d alpha)^+``, ``dA' = (d alpha)^-``."""
    d = np.asarray(d_alpha, dtype=float)
    return FvDecomposition(np.maximum(d, 0.0), np.maximum(-d, 0.0))


def is_e_supermartingale(lattice: Lattice, driver: Driver, Y: np.ndarray, tol: float = 1e-10) -> bool:
    """``E_{s,t}(Y_t) <= Y_s`` for every level ``t`` and every node ``s`` before it."""
    from .expectation import solve_bsde

    for lvl in range(1, lattice.N + 1):
        stop = lattice.level == lvl
        val = solve_bsde(lattice, driver, Y, stop).Y
        before = lattice.level < lvl
        if np.any(val[before] > Y[before] + tol * np.maximum(1.0, np.abs(Y[before]))):
            return False
    return True


def e_doob_meyer(lattice: Lattice, driver: Driver, Y: np.ndarray) -> DrbsdeSolution:
    """Decompose an E-supermartingale by reflecting it against itself from below."""
    Y = np.asarray(Y, dtype=float)
    zeta = np.where(lattice.is_terminal, Y, np.inf)
    return solve_drbsde_dp(lattice, driver, Y, zeta)
