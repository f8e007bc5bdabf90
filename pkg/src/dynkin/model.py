"""Time grids, atomic mark spaces and scenario lattices.

A lattice discretizes the pair (W, N~) over a uniform time grid.  Every
non-terminal node has ``m + 2`` children: a Brownian up move, a Brownian
down move and one branch per mark atom.  Branch probabilities solve the
moment system

    sum p_j = 1,  E[dW] = 0,  E[dW^2] = dt,  E[dN_i] = nu_i dt,  E[dW dN_i] = 0

exactly, which gives ``p_jump_i = nu_i dt``, ``p_up = p_down = (1 - sum nu dt) / 2``
and ``dW = +-sqrt(dt / (1 - sum nu dt))`` on the Brownian branches (``dW = 0`` on
jump branches).  The second moment of dN~_i is then ``nu_i dt (1 - nu_i dt)``;
the O(dt^2) mismatch is accepted.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CalibrationInfeasible,
    ConfigError,
    ObstacleOrderViolation,
    SizeLimit,
    TerminalMismatch,
)

DEFAULT_MAX_NODES = 200_000


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    @classmethod
    def from_times(cls, times: Sequence[float], rtol: float = 1e-12) -> "TimeGrid":
        """Build a grid from explicit times; only uniform grids starting at 0 are accepted."""
        t = np.asarray(times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0:
            raise ConfigError("times must start at 0 and have at least two entries")
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise ConfigError("times must be strictly increasing")
        if np.max(np.abs(steps - steps[0])) > rtol * t[-1]:
            raise ConfigError("nonuniform time grids are not supported")
        return cls(T=float(t[-1]), N=len(t) - 1)


@dataclass(frozen=True)
class MarkSpace:
    """Finitely many mark atoms ``e_i`` carrying Levy-measure masses ``nu_i``."""

    atoms: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        atoms = tuple(float(a) for a in self.atoms)
        weights = tuple(float(w) for w in self.weights)
        if len(atoms) != len(weights):
            raise ConfigError("atoms and weights must have equal length")
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ConfigError("mark weights must be finite and nonnegative")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def m(self) -> int:
        return len(self.atoms)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def e(self) -> np.ndarray:
        return np.asarray(self.atoms, dtype=float)

    def inner(self, delta, ell) -> np.ndarray:
        """<delta, ell>_nu = sum_i delta_i ell_i nu_i (broadcast over leading axes)."""
        return np.sum(np.asarray(delta) * np.asarray(ell) * self.nu, axis=-1)

    def norm(self, ell) -> np.ndarray:
        return np.sqrt(self.inner(ell, ell))

    @classmethod
    def none(cls) -> "MarkSpace":
        return cls((), ())


def branch_layout(dt: float, marks: MarkSpace):
    """Exact solution of the per-node moment system for the default branch layout.

    Returns ``(prob, dW, dN)`` with shapes ``(m+2,)``, ``(m+2,)``, ``(m+2, m)``.
    """
    m = marks.m
    nu = marks.nu
    lam = nu * dt
    if np.any(lam <= 0):
        raise CalibrationInfeasible("mark atoms with zero mass give zero-probability branches")
    total = float(lam.sum())
    if total >= 1.0:
        raise CalibrationInfeasible(
            f"sum nu_i dt = {total:g} >= 1 leaves no probability for Brownian branches"
        )
    p_bm = 0.5 * (1.0 - total)
    prob = np.concatenate([[p_bm, p_bm], lam])
    step = math.sqrt(dt / (1.0 - total))
    dW = np.concatenate([[step, -step], np.zeros(m)])
    dN = np.zeros((m + 2, m))
    for i in range(m):
        dN[2 + i, i] = 1.0
    return prob, dW, dN


def _default_increment(x, dt, dW, dNt, marks):
    # X_{n+1} = X_n + dW + sum_i e_i dN~_i
    return x + dW + dNt @ marks.e


@dataclass(frozen=True, eq=False)
class Lattice:
    """Immutable scenario lattice; nodes are stored level by level.

    ``children[n]`` is an integer array of shape ``(count_n, m+2)`` holding the
    global indices of the children of the nodes at level ``n``.
    """

    grid: TimeGrid
    marks: MarkSpace
    kind: str
    prob: np.ndarray
    dW: np.ndarray
    dN: np.ndarray
    offsets: np.ndarray
    children: tuple
    parent: np.ndarray
    branch: np.ndarray
    level: np.ndarray
    state: np.ndarray

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def m(self) -> int:
        return self.marks.m

    @property
    def branching(self) -> int:
        return len(self.prob)

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def dNt(self) -> np.ndarray:
        """Compensated jump increments per branch, shape ``(m+2, m)``."""
        return self.dN - self.marks.nu * self.dt

    @cached_property
    def times(self) -> np.ndarray:
        return self.grid.times[self.level]

    @cached_property
    def is_terminal(self) -> np.ndarray:
        return self.level == self.N

    def nodes(self, n: int) -> np.ndarray:
        return np.arange(self.offsets[n], self.offsets[n + 1])

    @cached_property
    def basis(self) -> np.ndarray:
        """Regression basis ``[1, dW, dN~_1..dN~_m]`` evaluated per branch."""
        return np.column_stack([np.ones(self.branching), self.dW, self.dNt])

    @cached_property
    def projector(self) -> np.ndarray:
        """Weighted least-squares operator mapping child values to ``(a, Z, k)``."""
        B = self.basis
        P = np.diag(self.prob)
        return np.linalg.solve(B.T @ P @ B, B.T @ P)

    def expect(self, values: np.ndarray, n: int) -> np.ndarray:
        """Conditional expectation at level ``n`` of a process given on level ``n+1``."""
        return values[self.children[n]] @ self.prob

    def ancestors(self, node: int) -> list:
        out = []
        while node >= 0:
            out.append(int(node))
            node = self.parent[node]
        return out[::-1]

    def subtree_mask(self, node: int) -> np.ndarray:
        if self.kind != "tree":
            raise ConfigError("subtrees are only defined on non-recombining trees")
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[node] = True
        for n in range(int(self.level[node]), self.N):
            idx = self.nodes(n)
            kids = self.children[n][mask[idx]]
            mask[kids.ravel()] = True
        return mask

    def interior_count(self, node: int) -> int:
        """Number of non-terminal nodes in the subtree rooted at ``node``."""
        h = self.N - int(self.level[node])
        if self.kind == "tree":
            return sum(self.branching ** d for d in range(h))
        return int(np.sum(self.subtree_mask(node) & ~self.is_terminal))

    def paths(self, node: int = 0):
        """Yield each root-to-leaf path through the subtree of ``node`` as a node list."""
        if self.kind != "tree":
            raise ConfigError("path enumeration requires a non-recombining tree")
        stack = [[int(node)]]
        while stack:
            path = stack.pop()
            last = path[-1]
            lvl = int(self.level[last])
            if lvl == self.N:
                yield path
                continue
            local = last - self.offsets[lvl]
            for child in reversed(self.children[lvl][local]):
                stack.append(path + [int(child)])

    def moment_errors(self) -> dict:
        p, dW, dNt = self.prob, self.dW, self.dNt
        nu_dt = self.marks.nu * self.dt
        return {
            "sum_p": abs(p.sum() - 1.0),
            "mean_dW": abs(p @ dW),
            "var_dW": abs(p @ dW**2 - self.dt),
            "mean_dN": float(np.max(np.abs(p @ self.dN - nu_dt), initial=0.0)),
            "cross": float(np.max(np.abs((p * dW) @ dNt), initial=0.0)),
        }


def tree_node_count(N: int, m: int) -> int:
    b = m + 2
    return sum(b**n for n in range(N + 1))


def build_tree(
    grid: TimeGrid,
    marks: MarkSpace,
    sde=None,
    x0: float = 0.0,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> Lattice:
    """Non-recombining scenario tree with ``(m+2)**n`` nodes at level ``n``.

    ``sde`` (optional) supplies vectorized ``b(x)``, ``sigma(x)`` and
    ``jump(x, e)``; the node state follows the Euler step
    ``X' = X + b dt + sigma dW + sum_i jump(X, e_i) dN~_i``.  Without it the
    state is ``x0 + W + sum_i e_i N~_i``.
    """
    dt = grid.dt
    prob, dW, dN = branch_layout(dt, marks)
    b = len(prob)
    count = tree_node_count(grid.N, marks.m)
    if count > max_nodes:
        raise SizeLimit(f"tree would have {count} nodes (cap {max_nodes})")
    sizes = [b**n for n in range(grid.N + 1)]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    level = np.repeat(np.arange(grid.N + 1), sizes)
    parent = np.full(count, -1, dtype=np.int64)
    branch = np.full(count, -1, dtype=np.int64)
    children = []
    dNt = dN - marks.nu * dt
    state = np.empty(count)
    state[0] = x0
    for n in range(grid.N):
        kids = offsets[n + 1] + np.arange(sizes[n] * b).reshape(sizes[n], b)
        children.append(kids)
        par = offsets[n] + np.arange(sizes[n])
        parent[kids] = par[:, None]
        branch[kids] = np.arange(b)[None, :]
        x = state[par][:, None]
        if sde is None:
            new = _default_increment(x, dt, dW[None, :], dNt, marks)
        else:
            new = _sde_increment(sde, x, dt, dW, dNt, marks)
        state[kids] = new
    return Lattice(
        grid=grid,
        marks=marks,
        kind="tree",
        prob=prob,
        dW=dW,
        dN=dN,
        offsets=offsets,
        children=tuple(children),
        parent=parent,
        branch=branch,
        level=level,
        state=state,
    )


def _sde_increment(sde, x, dt, dW, dNt, marks):
    # x has shape (n, 1); result (n, b)
    out = x + sde.b(x) * dt + sde.sigma(x) * dW[None, :]
    for i, e in enumerate(marks.atoms):
        out = out + sde.jump(x, e) * dNt[None, :, i]
    return out


def build_recombining(
    grid: TimeGrid,
    marks: MarkSpace,
    sde=None,
    x0: float = 0.0,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> Lattice:
    """Recombining lattice indexed by branch counts.

    A node at level ``n`` is a composition ``(c_up, c_down, c_1..c_m)`` of ``n``.
    Recombination needs state-independent increments, so ``sde`` (if given) must
    report ``state_independent``.
    """
    if sde is not None and not getattr(sde, "state_independent", False):
        raise ConfigError("recombining lattices need state-independent coefficients")
    dt = grid.dt
    prob, dW, dN = branch_layout(dt, marks)
    b = len(prob)
    per_level = [math.comb(n + b - 1, b - 1) for n in range(grid.N + 1)]
    count = sum(per_level)
    if count > max_nodes:
        raise SizeLimit(f"lattice would have {count} nodes (cap {max_nodes})")
    offsets = np.concatenate([[0], np.cumsum(per_level)])
    level = np.repeat(np.arange(grid.N + 1), per_level)
    parent = np.full(count, -1, dtype=np.int64)
    branch = np.full(count, -1, dtype=np.int64)
    counts = np.zeros((count, b), dtype=np.int64)

    def compositions(n):
        # all b-tuples of nonnegative ints summing to n, deterministic order
        for cut in itertools.combinations(range(n + b - 1), b - 1):
            prev = -1
            parts = []
            for c in cut:
                parts.append(c - prev - 1)
                prev = c
            parts.append(n + b - 1 - prev - 1)
            yield tuple(parts)

    index_prev = None
    children = []
    for n in range(grid.N + 1):
        comps = list(compositions(n))
        index = {c: offsets[n] + i for i, c in enumerate(comps)}
        counts[offsets[n] : offsets[n + 1]] = comps
        if index_prev is not None:
            kids = np.empty((per_level[n - 1], b), dtype=np.int64)
            for c, i in index_prev.items():
                for j in range(b):
                    cc = list(c)
                    cc[j] += 1
                    kids[i - offsets[n - 1], j] = index[tuple(cc)]
            children.append(kids)
            # parent/branch only record one representative predecessor
            for j in range(b - 1, -1, -1):
                parent[kids[:, j]] = np.arange(offsets[n - 1], offsets[n])
                branch[kids[:, j]] = j
        index_prev = index

    t = grid.times[level]
    W = counts @ dW
    Nt = counts @ dN - np.outer(t, marks.nu)
    if sde is None:
        state = x0 + W + Nt @ marks.e
    else:
        state = x0 + sde.b(0.0) * t + sde.sigma(0.0) * W
        for i, e in enumerate(marks.atoms):
            state = state + sde.jump(0.0, e) * Nt[:, i]
    return Lattice(
        grid=grid,
        marks=marks,
        kind="lattice",
        prob=prob,
        dW=dW,
        dN=dN,
        offsets=offsets,
        children=tuple(children),
        parent=parent,
        branch=branch,
        level=level,
        state=np.asarray(state, dtype=float),
    )


def build_lattice(config: dict, sde=None) -> Lattice:
    """Build from a JSON model config ``{"T", "N", "marks", "kind", "max_nodes", "x0"}``."""
    try:
        grid = TimeGrid(float(config["T"]), int(config["N"]))
    except KeyError as exc:
        raise ConfigError(f"model config missing {exc}") from None
    marks_cfg = config.get("marks", [])
    marks = MarkSpace(
        tuple(float(mk["e"]) for mk in marks_cfg),
        tuple(float(mk["nu"]) for mk in marks_cfg),
    )
    kind = config.get("kind", "tree")
    cap = int(config.get("max_nodes", DEFAULT_MAX_NODES))
    x0 = float(config.get("x0", 0.0))
    if kind == "tree":
        return build_tree(grid, marks, sde=sde, x0=x0, max_nodes=cap)
    if kind == "lattice":
        return build_recombining(grid, marks, sde=sde, x0=x0, max_nodes=cap)
    raise ConfigError(f"unknown lattice kind {kind!r}")


def is_predictable(lattice: Lattice, values: np.ndarray, atol: float = 0.0) -> bool:
    """True when siblings carry equal values (the value is fixed by the parent)."""
    for n in range(lattice.N):
        sib = values[lattice.children[n]]
        if np.any(np.abs(sib - sib[:, :1]) > atol):
            return False
    return True


def validate_obstacles(lattice: Lattice, xi: np.ndarray, zeta: np.ndarray, atol: float = 0.0):
    xi = np.asarray(xi, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if xi.shape != (lattice.n_nodes,) or zeta.shape != (lattice.n_nodes,):
        raise ConfigError("obstacles must carry one value per node")
    bad = np.nonzero(xi > zeta + atol)[0]
    if bad.size:
        n = int(bad[0])
        raise ObstacleOrderViolation(f"lower obstacle {xi[n]} exceeds upper {zeta[n]} at node {n}")
    term = lattice.is_terminal
    if np.any(np.abs(xi[term] - zeta[term]) > atol):
        raise TerminalMismatch("obstacles must coincide at terminal nodes")
    return xi, zeta


def obstacle_on_lattice(
    lattice: Lattice,
    lower_fn: Callable,
    upper_fn: Callable,
    terminal_fn: Callable,
):
    """Evaluate ``lower_fn(t, x)``, ``upper_fn(t, x)`` before T and ``terminal_fn(x)`` at T."""
    t = lattice.times
    x = lattice.state
    term = lattice.is_terminal
    xi = np.broadcast_to(np.asarray(lower_fn(t, x), dtype=float), t.shape).copy()
    zeta = np.broadcast_to(np.asarray(upper_fn(t, x), dtype=float), t.shape).copy()
    g = np.broadcast_to(np.asarray(terminal_fn(x[term]), dtype=float), x[term].shape)
    xi[term] = g
    zeta[term] = g
    return validate_obstacles(lattice, xi, zeta)
