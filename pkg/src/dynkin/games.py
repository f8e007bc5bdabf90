"""Generalized Dynkin games and mixed control/stopping games on trees.

Brute force enumerates every pair of canonical stopping strategies.  A
strategy below a node either stops there or continues with a control choice
and one strategy per child, so strategies are counted recursively:

    R(leaf) = 1,   R(n) = 1 + |U| * prod_children R(c)

The joint outcome of a pair below a node (its "status") is either a stop by
the maximizer (pays xi), a stop by the minimizer only (pays zeta), or a
continuation with a control pair and one status per child.  Criterion values
are computed once per status by one BSDE step each, and a table ``M[tau,
sigma]`` maps strategy pairs to statuses.  The tables depend only on the
subtree height, so they are shared across nodes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .drbsde import DrbsdeSolution, solve_drbsde_dp
from .drivers import (
    Driver,
    LinearDriver,
    SelectedDriver,
    SupInfDriver,
    check_monotonicity,
    check_scheme_monotonicity,
    sample_points,
)
from .errors import ConfigError, IsaacsViolated, SaddleViolation, SizeLimit
from .expectation import (
    StoppingRule,
    change_of_measure_value,
    check_step_contraction,
    g_expectation,
    implicit_step,
    payoff_terminal,
    project,
)
from .model import Lattice, validate_obstacles

DEFAULT_INTERIOR_CAP = 22
DEFAULT_PAIR_CAP = 4_000_000
CONTACT_TOL = 1e-10
SADDLE_SLACK = 1e-9


def _require_tree(lattice: Lattice):
    if lattice.kind != "tree":
        raise ConfigError("games are enumerated on non-recombining trees")


def _height(lattice: Lattice, node: int) -> int:
    return lattice.N - int(lattice.level[node])


def _children(lattice: Lattice, node: int) -> np.ndarray:
    lvl = int(lattice.level[node])
    return lattice.children[lvl][node - lattice.offsets[lvl]]


def strategy_count(height: int, branching: int, n_controls: int = 1) -> int:
    r = 1
    for _ in range(height):
        r = 1 + n_controls * r**branching
    return r


def _check_caps(lattice, node, n_u, n_v, interior_cap, pair_cap):
    interior = lattice.interior_count(node)
    if interior > interior_cap:
        raise SizeLimit(f"subtree has {interior} interior nodes (cap {interior_cap})")
    h = _height(lattice, node)
    pairs = strategy_count(h, lattice.branching, n_u) * strategy_count(h, lattice.branching, n_v)
    if pairs > pair_cap:
        raise SizeLimit(f"{pairs} strategy pairs exceed the cap {pair_cap}")


# ---------------------------------------------------------------------------
# stopping rules


def enumerate_stopping_rules(lattice: Lattice, from_node: int = 0, cap: int = DEFAULT_INTERIOR_CAP):
    """Yield every canonical stopping rule of the subtree at ``from_node`` once.

    Order: stop at ``from_node`` first, then continuation rules in the product
    order of the children's rules.  Leaves admit only the implicit stop.
    """
    _require_tree(lattice)
    if lattice.interior_count(from_node) > cap:
        raise SizeLimit(f"subtree has {lattice.interior_count(from_node)} interior nodes (cap {cap})")

    def rules(node):
        if lattice.is_terminal[node]:
            yield frozenset()
            return
        yield frozenset([node])
        kids = [list(rules(int(c))) for c in _children(lattice, node)]
        for combo in itertools.product(*kids):
            yield frozenset().union(*combo)

    for s in rules(int(from_node)):
        yield StoppingRule(s)


def strategy_index(lattice: Lattice, mask, node: int = 0, controls=None, n_controls: int = 1) -> int:
    """Index of the strategy (stop mask plus optional per-node controls) in enumeration order."""
    mask = np.asarray(mask, dtype=bool)

    def rec(n):
        if lattice.is_terminal[n] or mask[n]:
            return 0
        kids = _children(lattice, n)
        rc = strategy_count(_height(lattice, n) - 1, lattice.branching, n_controls)
        idx = 0
        for c in kids:
            idx = idx * rc + rec(int(c))
        u = 0 if controls is None else int(controls[n])
        return 1 + u * rc ** len(kids) + idx

    return rec(int(node))


def rule_from_index(lattice: Lattice, index: int, node: int = 0) -> StoppingRule:
    """Inverse of ``strategy_index`` for plain stopping rules."""

    def rec(n, i):
        if lattice.is_terminal[n]:
            return set()
        if i == 0:
            return {n}
        kids = _children(lattice, n)
        rc = strategy_count(_height(lattice, n) - 1, lattice.branching)
        i -= 1
        digits = []
        for _ in kids:
            digits.append(i % rc)
            i //= rc
        out = set()
        for c, d in zip(kids, reversed(digits)):
            out |= rec(int(c), d)
        return out

    return StoppingRule(rec(int(node), int(index)))


# ---------------------------------------------------------------------------
# status tables


@lru_cache(maxsize=None)
def _tables(height: int, branching: int, n_u: int, n_v: int):
    """``(R_tau, R_sigma, S, M)`` for a subtree of the given height."""
    if height == 0:
        return 1, 1, 1, np.zeros((1, 1), dtype=np.int64)
    rt_c, rs_c, s_c, M_c = _tables(height - 1, branching, n_u, n_v)
    b = branching
    rt = 1 + n_u * rt_c**b
    rs = 1 + n_v * rs_c**b
    s = 2 + n_u * n_v * s_c**b

    def digits(count, base, n_ctrl):
        i = np.arange(count - 1)
        ctrl = i // base**b
        rest = i % base**b
        d = np.empty((count - 1, b), dtype=np.int64)
        for j in range(b - 1, -1, -1):
            d[:, j] = rest % base
            rest //= base
        return ctrl, d

    ut, dt_ = digits(rt, rt_c, n_u)
    vs, ds = digits(rs, rs_c, n_v)
    cont = 2 + (ut[:, None] * n_v + vs[None, :]) * s_c**b
    for j in range(b):
        cont = cont + M_c[dt_[:, j][:, None], ds[:, j][None, :]] * s_c ** (b - 1 - j)
    M = np.empty((rt, rs), dtype=np.int64)
    M[0, :] = 0
    M[1:, 0] = 1
    M[1:, 1:] = cont
    M.setflags(write=False)
    return rt, rs, s, M


def _family(driver_or_family):
    if isinstance(driver_or_family, Driver):
        return ((driver_or_family,),)
    return tuple(tuple(r) for r in driver_or_family)


def status_values(lattice: Lattice, family, xi, zeta, root: int = 0) -> dict:
    """Criterion value of every status at every node of the subtree of ``root``."""
    family = _family(family)
    n_u, n_v = len(family), len(family[0])
    crit = {}
    t_grid = lattice.grid.times
    start = int(lattice.level[root])
    order = [root]
    frontier = [root]
    for _ in range(start, lattice.N):
        frontier = [int(c) for n in frontier for c in _children(lattice, n)]
        order.extend(frontier)
    for node in reversed(order):
        if lattice.is_terminal[node]:
            crit[node] = np.array([xi[node]])
            continue
        kids = [crit[int(c)] for c in _children(lattice, node)]
        grids = np.meshgrid(*[np.arange(len(c)) for c in kids], indexing="ij")
        V = np.stack([c[g.ravel()] for c, g in zip(kids, grids)], axis=1)
        E, Z, k, _ = project(lattice, V)
        P = len(E)
        nodes = np.full(P, node)
        x = np.full(P, lattice.state[node])
        t = t_grid[lattice.level[node]]
        parts = [np.array([xi[node], zeta[node]])]
        for u in range(n_u):
            for v in range(n_v):
                parts.append(implicit_step(family[u][v], t, E, Z, k, lattice.dt, nodes, x))
        crit[node] = np.concatenate(parts)
    return crit


@dataclass
class GameReport:
    upper: np.ndarray
    lower: np.ndarray
    Y: np.ndarray
    value_exists: bool
    max_gap: float
    best_sigma: dict = field(default_factory=dict)
    best_tau: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "upper_value": self.upper,
            "lower_value": self.lower,
            "drbsde_value": self.Y,
            "value_exists": self.value_exists,
            "max_gap": self.max_gap,
        }


def game_values_bruteforce(
    lattice: Lattice,
    driver,
    xi,
    zeta,
    nodes: Optional[Sequence[int]] = None,
    solution: Optional[DrbsdeSolution] = None,
    interior_cap: int = DEFAULT_INTERIOR_CAP,
    pair_cap: int = DEFAULT_PAIR_CAP,
    tol: float = 1e-9,
) -> GameReport:
    """Upper and lower values over all strategy pairs at each node in ``nodes``.

    ``driver`` may be a single driver or a ``|U| x |V|`` family, in which case
    the players also choose controls at every node they continue from.
    """
    _require_tree(lattice)
    xi, zeta = validate_obstacles(lattice, xi, zeta)
    family = _family(driver)
    n_u, n_v = len(family), len(family[0])
    for row in family:
        for F in row:
            check_step_contraction(lattice, F)
    _check_caps(lattice, 0, n_u, n_v, interior_cap, pair_cap)
    crit = status_values(lattice, family, xi, zeta)
    if nodes is None:
        nodes = range(lattice.n_nodes)
    upper = np.full(lattice.n_nodes, np.nan)
    lower = np.full(lattice.n_nodes, np.nan)
    best_sigma, best_tau = {}, {}
    for s in nodes:
        s = int(s)
        _, _, _, M = _tables(_height(lattice, s), lattice.branching, n_u, n_v)
        W = crit[s][M]
        col_max = W.max(axis=0)
        row_min = W.min(axis=1)
        best_sigma[s] = int(np.argmin(col_max))
        best_tau[s] = int(np.argmax(row_min))
        upper[s] = col_max[best_sigma[s]]
        lower[s] = row_min[best_tau[s]]
    if solution is None:
        g = driver if isinstance(driver, Driver) else SupInfDriver(family, lattice.marks)
        solution = solve_drbsde_dp(lattice, g, xi, zeta)
    idx = np.asarray(list(nodes), dtype=np.int64)
    gap = float(max(np.max(np.abs(upper[idx] - lower[idx])), np.max(np.abs(upper[idx] - solution.Y[idx]))))
    exists = bool(np.all(np.abs(upper[idx] - lower[idx]) <= tol))
    return GameReport(upper, lower, solution.Y, exists, gap, best_sigma, best_tau)


def game_values_naive(lattice: Lattice, driver: Driver, xi, zeta, node: int = 0):
    """Upper and lower value at ``node`` via one g-expectation per rule pair (small trees)."""
    rules = list(enumerate_stopping_rules(lattice, node))
    W = np.empty((len(rules), len(rules)))
    for i, tau in enumerate(rules):
        for j, sigma in enumerate(rules):
            W[i, j] = g_expectation(lattice, driver, tau, sigma, xi, zeta)[node]
    return float(W.max(axis=0).min()), float(W.min(axis=1).max()), W


def game_value_dp(lattice: Lattice, driver: Driver, xi, zeta) -> np.ndarray:
    return solve_drbsde_dp(lattice, driver, xi, zeta).Y


# ---------------------------------------------------------------------------
# saddle points


@dataclass
class SaddleReport:
    tau_star: StoppingRule
    sigma_star: StoppingRule
    value: float
    verified: bool
    worst_violation: float
    eps_reports: list = field(default_factory=list)

    def to_dict(self):
        return {
            "tau_star": sorted(self.tau_star.stop_set),
            "sigma_star": sorted(self.sigma_star.stop_set),
            "value": self.value,
            "verified": self.verified,
            "worst_violation": self.worst_violation,
            "epsilon": self.eps_reports,
        }


def contact_masks(solution: DrbsdeSolution, eps: float = 0.0, tol: float = CONTACT_TOL):
    """Stop masks ``{Y <= xi + eps}`` and ``{Y >= zeta - eps}`` (with contact tolerance)."""
    Y = solution.Y
    slack = tol * np.maximum(1.0, np.abs(Y))
    tau = Y <= solution.xi + eps + slack
    sigma = Y >= solution.zeta - eps - slack
    return tau, sigma


def _subtree_rule(lattice, mask, node):
    sub = lattice.subtree_mask(node) & mask & ~lattice.is_terminal
    return StoppingRule.from_mask(sub).canonical(lattice)


def epsilon_constant(C: float, T: float) -> float:
    return math.exp(C * T) * (1.0 + C * T)


def extract_saddle(
    lattice: Lattice,
    solution: DrbsdeSolution,
    driver,
    S: int = 0,
    eps_list: Sequence[float] = (),
    controls: Optional[tuple] = None,
    slack: float = SADDLE_SLACK,
    raise_on_fail: bool = True,
    crit: Optional[dict] = None,
) -> SaddleReport:
    """Contact-set rules and their exhaustive saddle verification at node ``S``.

    ``controls`` = ``(u_star, v_star)`` per node for mixed games, in which case
    deviations range over controls as well.  ``crit`` may carry status
    values already computed by ``status_values`` for a subtree containing ``S``.
    """
    _require_tree(lattice)
    family = _family(driver)
    n_u, n_v = len(family), len(family[0])
    xi, zeta = solution.xi, solution.zeta
    if crit is None or S not in crit:
        crit = status_values(lattice, family, xi, zeta, root=S)
    crit = crit[S]
    _, _, _, M = _tables(_height(lattice, S), lattice.branching, n_u, n_v)
    uu, vv = (None, None) if controls is None else controls
    t_mask, s_mask = contact_masks(solution)
    it = strategy_index(lattice, t_mask, S, uu, n_u)
    js = strategy_index(lattice, s_mask, S, vv, n_v)
    value = float(crit[M[it, js]])
    row = crit[M[:, js]]  # maximizer deviations against sigma*
    col = crit[M[it, :]]  # minimizer deviations against tau*
    worst = max(float(np.max(row) - value), float(value - np.min(col)), abs(value - float(solution.Y[S])))
    verified = worst <= slack
    if not verified and raise_on_fail:
        player = "tau" if float(np.max(row) - value) > slack else "sigma"
        raise SaddleViolation(f"saddle inequality fails for {player} by {worst:g}", player, worst)
    T_rem = lattice.grid.T - lattice.times[S]
    C = max(F.lipschitz_C for r in family for F in r)
    K = epsilon_constant(C, T_rem)
    eps_reports = []
    for eps in eps_list:
        te, se = contact_masks(solution, eps)
        ie = strategy_index(lattice, te, S, uu, n_u)
        je = strategy_index(lattice, se, S, vv, n_v)
        loss_tau = float(solution.Y[S] - np.min(crit[M[ie, :]]))
        loss_sigma = float(np.max(crit[M[:, je]]) - solution.Y[S])
        loss = max(loss_tau, loss_sigma, 0.0)
        eps_reports.append({"eps": float(eps), "K": K, "loss": loss, "ratio": loss / eps, "ok": loss <= K * eps + slack})
    if raise_on_fail and any(not r["ok"] for r in eps_reports):
        bad = next(r for r in eps_reports if not r["ok"])
        raise SaddleViolation(f"epsilon-saddle loss {bad['loss']:g} exceeds K*eps at eps={bad['eps']:g}", "eps", bad["loss"])
    return SaddleReport(
        _subtree_rule(lattice, t_mask, S),
        _subtree_rule(lattice, s_mask, S),
        value,
        verified,
        worst,
        eps_reports,
    )


# ---------------------------------------------------------------------------
# Assumption check


def assumption_check(lattice: Lattice, driver: Driver, n_samples: int = 2000, seed: int = 0):
    """Sampled monotonicity in ``k`` plus monotonicity of the discrete step."""
    rng = np.random.default_rng(seed)
    samples = sample_points(rng, n_samples, lattice.m)
    samples["nodes"] = rng.integers(0, max(1, lattice.offsets[lattice.N]), n_samples)
    witness = check_monotonicity(driver, samples)
    margin = check_scheme_monotonicity(lattice, driver)
    return witness, margin


# ---------------------------------------------------------------------------
# mixed games


@dataclass(frozen=True)
class MixedGameSpec:
    family: tuple  # family[u][v] is a Driver
    U: tuple = ()
    V: tuple = ()

    def __post_init__(self):
        fam = _family(self.family)
        object.__setattr__(self, "family", fam)
        if not self.U:
            object.__setattr__(self, "U", tuple(range(len(fam))))
        if not self.V:
            object.__setattr__(self, "V", tuple(range(len(fam[0]))))
        if len(self.U) != len(fam) or len(self.V) != len(fam[0]):
            raise ConfigError("control labels do not match the family table")

    @property
    def driver(self) -> SupInfDriver:
        F = self.family[0][0]
        return SupInfDriver(self.family, F.marks)


@dataclass
class MixedGameReport:
    solution: DrbsdeSolution
    u_star: np.ndarray
    v_star: np.ndarray
    isaacs_ok: bool
    isaacs_gap: float
    game: Optional[GameReport] = None
    saddle: Optional[SaddleReport] = None


def optimal_controls(lattice: Lattice, mixed: MixedGameSpec, solution: DrbsdeSolution):
    """Per-node ``(u*, v*)`` at the solved arguments and the Isaacs gap.

    ``u*`` maximizes ``min_v F`` and ``v*`` minimizes ``max_u F``; first index
    wins ties.  The gap is ``max_u F(u, v*) - min_v F(u*, v)``, which is
    nonpositive up to rounding exactly when ``(u*, v*)`` is a pure saddle.
    """
    u_star = np.zeros(lattice.n_nodes, dtype=np.int64)
    v_star = np.zeros(lattice.n_nodes, dtype=np.int64)
    gap = np.zeros(lattice.n_nodes)
    drv = mixed.driver
    for n in range(lattice.N):
        nodes = lattice.nodes(n)
        t = lattice.grid.times[n]
        tab = drv.table(t, solution.Y_pre[nodes], solution.Z[nodes], solution.k[nodes], nodes, lattice.state[nodes])
        u = np.argmax(tab.min(axis=1), axis=0)
        v = np.argmin(tab.max(axis=0), axis=0)
        cols = np.arange(len(nodes))
        u_star[nodes] = u
        v_star[nodes] = v
        # tab[u, :, cols] has shape (nodes, |V|)
        gap[nodes] = tab[:, v, cols].max(axis=0) - tab[u, :, cols].min(axis=1)
    return u_star, v_star, gap


def solve_mixed_game(
    lattice: Lattice,
    mixed: MixedGameSpec,
    xi,
    zeta,
    brute_force: bool = False,
    isaacs_tol: float = 1e-10,
    raise_on_isaacs: bool = False,
) -> MixedGameReport:
    drv = mixed.driver
    sol = solve_drbsde_dp(lattice, drv, xi, zeta)
    u_star, v_star, gap = optimal_controls(lattice, mixed, sol)
    scale = isaacs_tol * np.maximum(1.0, np.abs(sol.g))
    ok = bool(np.all(gap <= scale))
    if not ok and raise_on_isaacs:
        n = int(np.argmax(gap - scale))
        raise IsaacsViolated(f"no pure saddle in controls at node {n} (gap {gap[n]:g})")
    rep = MixedGameReport(sol, u_star, v_star, ok, float(np.max(gap, initial=0.0)))
    if brute_force:
        rep.game = game_values_bruteforce(lattice, mixed.family, sol.xi, sol.zeta, solution=sol)
        if ok:
            rep.saddle = extract_saddle(lattice, sol, mixed.family, 0, controls=(u_star, v_star))
    return rep


def selected_solution(lattice, mixed: MixedGameSpec, u, v, xi, zeta) -> DrbsdeSolution:
    """DRBSDE solution under fixed control processes ``u``, ``v``."""
    n = lattice.n_nodes
    u = np.broadcast_to(np.asarray(u, dtype=np.int64), (n,))
    v = np.broadcast_to(np.asarray(v, dtype=np.int64), (n,))
    drv = SelectedDriver(mixed.family, u, v, lattice.marks)
    return solve_drbsde_dp(lattice, drv, xi, zeta)


def check_sandwich(lattice, mixed, xi, zeta, report: MixedGameReport, u_processes, v_processes, tol=1e-10):
    """Worst violation of ``Y^{u, v*} <= Y^{u*, v*} <= Y^{u*, v}`` over the given processes."""
    Y = selected_solution(lattice, mixed, report.u_star, report.v_star, xi, zeta).Y
    worst = 0.0
    for u in u_processes:
        lo = selected_solution(lattice, mixed, u, report.v_star, xi, zeta).Y
        worst = max(worst, float(np.max(lo - Y)))
    for v in v_processes:
        hi = selected_solution(lattice, mixed, report.u_star, v, xi, zeta).Y
        worst = max(worst, float(np.max(Y - hi)))
    return worst, float(np.max(np.abs(Y - report.solution.Y)))


def linear_coefficients(lattice, mixed: MixedGameSpec, u, v):
    """Per-node ``(beta, theta, gamma, c)`` of a linear family under controls ``u``, ``v``."""
    n = lattice.n_nodes
    beta = np.zeros(n)
    theta = np.zeros(n)
    gamma = np.zeros((n, lattice.m))
    c = np.zeros(n)
    u = np.broadcast_to(np.asarray(u, dtype=np.int64), (n,))
    v = np.broadcast_to(np.asarray(v, dtype=np.int64), (n,))
    for i in range(n):
        F = mixed.family[u[i]][v[i]]
        if not isinstance(F, LinearDriver):
            raise ConfigError("change-of-measure check needs a linear family")
        beta[i], theta[i], c[i] = F.beta, F.theta, F.c
        gamma[i] = F.gamma
    return beta, theta, gamma, c


def linear_family_crosscheck(lattice, mixed: MixedGameSpec, xi, zeta, cases):
    """Max gap between the g-expectation and the density-process evaluation.

    ``cases`` is an iterable of ``(u, v, tau, sigma)`` with per-node control
    arrays and stopping rules.
    """
    worst = 0.0
    count = 0
    for u, v, tau, sigma in cases:
        drv = SelectedDriver(mixed.family, np.asarray(u), np.asarray(v), lattice.marks)
        val = g_expectation(lattice, drv, tau, sigma, xi, zeta)[0]
        stop, term = payoff_terminal(lattice, tau.mask(lattice), sigma.mask(lattice), xi, zeta)
        beta, theta, gamma, c = linear_coefficients(lattice, mixed, u, v)
        ref = change_of_measure_value(lattice, beta, theta, gamma, c, term, stop)
        worst = max(worst, abs(val - ref))
        count += 1
    return worst, count


def mixed_spec_from_config(cfg: dict, marks) -> MixedGameSpec:
    from .drivers import driver_from_config

    try:
        fam = [[driver_from_config(c, marks) for c in row] for row in cfg["family"]]
    except KeyError as exc:
        raise ConfigError(f"mixed game config missing {exc}") from None
    return MixedGameSpec(tuple(tuple(r) for r in fam), tuple(cfg.get("U", ())), tuple(cfg.get("V", ())))
