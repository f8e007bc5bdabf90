"""Two-obstacle integro-differential variational inequality on a 1-d grid.

The state follows ``dX = b(X) dt + sigma(X) dW + sum_i beta(X, e_i) dN~_i`` and
the value function solves, in the complementarity sense,

    h1 <= u <= h2,   u(T, .) = g,
    -du/dt - L u - f(t, x, u, sigma du/dx, B u) = 0 where h1 < u < h2,

with ``L = A + K`` (diffusion, drift and compensated jumps) and
``B phi = sum_i (phi(x + beta_i) - phi(x)) gamma(x, e_i) nu_i``.  The scheme
is explicit in time except for the ``u`` argument of ``f``, upwinds the
compensated drift, interpolates jump destinations linearly, and clamps into
the obstacle band after every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .configs import fn_from_config
from .drbsde import solve_drbsde_dp
from .drivers import LinearDriver
from .errors import CflViolated, ConfigError, NonConvergence
from .io import write_csv
from .model import DEFAULT_MAX_NODES, MarkSpace, TimeGrid, build_recombining, build_tree, obstacle_on_lattice

LABEL_INTERIOR, LABEL_LOWER, LABEL_UPPER = 0, 1, 2


@dataclass(frozen=True)
class SdeSpec:
    """Affine coefficients: ``b = b0 + b1 x``, ``sigma = s0 + s1 x``, ``beta = (jscale + jx x) e``."""

    marks: MarkSpace = field(default_factory=MarkSpace.none)
    b0: float = 0.0
    b1: float = 0.0
    s0: float = 1.0
    s1: float = 0.0
    jscale: float = 1.0
    jx: float = 0.0

    @property
    def state_independent(self) -> bool:
        return self.b1 == 0.0 and self.s1 == 0.0 and self.jx == 0.0

    def b(self, x):
        return self.b0 + self.b1 * np.asarray(x, dtype=float)

    def sigma(self, x):
        return self.s0 + self.s1 * np.asarray(x, dtype=float)

    def jump(self, x, e):
        return (self.jscale + self.jx * np.asarray(x, dtype=float)) * e

    def lipschitz(self):
        return {"b": abs(self.b1), "sigma": abs(self.s1), "beta": abs(self.jx) * max(map(abs, self.marks.atoms), default=0.0)}


@dataclass(frozen=True)
class PideDriver:
    """``f = y_coef*y + z_coef*z + q_coef*q + const`` with ``q = B u``; ``q_coef >= 0``."""

    y_coef: float = 0.0
    z_coef: float = 0.0
    q_coef: float = 0.0
    const: float = 0.0

    def __post_init__(self):
        if self.q_coef < 0:
            raise ConfigError("the driver must be nondecreasing in its integral argument (q_coef >= 0)")

    def __call__(self, y, z, q):
        return self.y_coef * y + self.z_coef * z + self.q_coef * q + self.const


@dataclass(frozen=True)
class PideProblem:
    sde: SdeSpec
    h1: Callable
    h2: Callable
    terminal: Callable
    T: float = 1.0
    driver: PideDriver = field(default_factory=PideDriver)
    gamma_scale: float = 0.0

    def gamma(self, x, e):
        """Jump weight ``gamma(x, e) = gamma_scale * min(1, |e|)`` (bounded by ``C (1 ^ |e|)``)."""
        return np.full(np.shape(x), self.gamma_scale * min(1.0, abs(e)))

    def lattice_driver(self) -> LinearDriver:
        """Equivalent lattice driver ``beta y + theta z + <gamma, k>_nu + c``."""
        marks = self.sde.marks
        gam = tuple(self.driver.q_coef * self.gamma_scale * min(1.0, abs(e)) for e in marks.atoms)
        return LinearDriver(self.driver.y_coef, gam, self.driver.const, marks, theta=self.driver.z_coef)


@dataclass(frozen=True)
class PideGrid:
    x_min: float
    x_max: float
    M: int
    N_t: Optional[int] = None
    cfl: float = 0.9

    def __post_init__(self):
        if self.M < 4 or not self.x_max > self.x_min:
            raise ConfigError("need at least 4 grid points on a non-empty interval")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.M)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.M - 1)


@dataclass
class Stencil:
    lower: np.ndarray  # weight on u[j-1] per unit time (interior j)
    center: np.ndarray
    upper: np.ndarray
    jump_left: np.ndarray  # (m, M) left interpolation index per atom
    jump_wl: np.ndarray  # (m, M) weight on the left index
    nu: np.ndarray
    gamma: np.ndarray  # (m, M) gamma(x, e_i)
    zfac: np.ndarray  # sigma(x) / (2 dx)
    dt_max: float

    def apply_L(self, u):
        """Generator applied at interior points; boundary entries are left at 0."""
        out = np.zeros_like(u)
        out[1:-1] = self.lower[1:-1] * u[:-2] + self.center[1:-1] * u[1:-1] + self.upper[1:-1] * u[2:]
        for i in range(len(self.nu)):
            out[1:-1] += self.nu[i] * (self.jump_value(u, i)[1:-1] - u[1:-1])
        return out

    def jump_value(self, u, i):
        l = self.jump_left[i]
        w = self.jump_wl[i]
        return w * u[l] + (1.0 - w) * u[np.minimum(l + 1, len(u) - 1)]

    def apply_B(self, u):
        out = np.zeros_like(u)
        for i in range(len(self.nu)):
            out += (self.jump_value(u, i) - u) * self.gamma[i] * self.nu[i]
        return out

    def z_of(self, u):
        z = np.zeros_like(u)
        z[1:-1] = self.zfac[1:-1] * (u[2:] - u[:-2])
        return z


def discretize_operators(problem: PideProblem, grid: PideGrid, dt: Optional[float] = None) -> Stencil:
    """Stencil coefficients and the largest monotone time step.

    Off-diagonal weights are nonnegative by construction; the center weight of
    one explicit step, ``1 + dt * (center - jump mass)``, fixes ``dt_max``.
    Raises ``CflViolated`` if ``dt`` exceeds it.
    """
    sde = problem.sde
    x = grid.x
    dx = grid.dx
    marks = sde.marks
    nu = marks.nu
    sig = sde.sigma(x) * np.ones_like(x)
    bet = np.array([sde.jump(x, e) * np.ones_like(x) for e in marks.atoms]).reshape(marks.m, len(x))
    b_eff = sde.b(x) * np.ones_like(x) - (nu @ bet if marks.m else 0.0)
    diff = 0.5 * sig**2 / dx**2
    up = np.maximum(b_eff, 0.0) / dx
    dn = np.maximum(-b_eff, 0.0) / dx
    # z-term of the driver enters through a central difference
    zfac = sig / (2 * dx)
    zc = problem.driver.z_coef * zfac
    lower = diff + dn
    upper = diff + up
    if np.any(lower - zc < -1e-15) or np.any(upper + zc < -1e-15):
        raise CflViolated("grid too coarse: the central z-difference breaks monotonicity (reduce dx)")
    center = -(2 * diff + up + dn)
    dest = np.clip(x[None, :] + bet, grid.x_min, grid.x_max)
    pos = (dest - grid.x_min) / dx
    left = np.clip(np.floor(pos + 1e-12).astype(np.int64), 0, len(x) - 1)
    wl = 1.0 - (pos - left)
    wl = np.where(left == len(x) - 1, 1.0, np.clip(wl, 0.0, 1.0))
    gam = np.array([problem.gamma(x, e) for e in marks.atoms]).reshape(marks.m, len(x))
    qc = problem.driver.q_coef
    # center weight of one explicit step: 1 - dt * (2 diff + |b|/dx + sum nu (1 + q gamma))
    jump_mass = (nu[:, None] * (1.0 + qc * gam)).sum(axis=0) if marks.m else np.zeros_like(x)
    rate = -center + jump_mass
    dt_max = float(1.0 / np.max(rate)) if np.max(rate) > 0 else math.inf
    st = Stencil(lower, center, upper, left, wl, nu, gam, zfac, dt_max)
    if dt is not None and dt > dt_max * (1 + 1e-12):
        raise CflViolated(f"dt = {dt:g} exceeds the monotone limit {dt_max:g}")
    return st


@dataclass
class PideSolution:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray  # (N_t + 1, M)
    labels: np.ndarray
    cfl_ratio: float
    interior_residual: float

    def at(self, t_index: int, x) -> np.ndarray:
        return np.interp(x, self.x, self.u[t_index])

    def write_csv(self, path):
        rows = ((float(self.t[n]), float(self.x[j]), float(self.u[n, j]), int(self.labels[n, j]))
                for n in range(len(self.t)) for j in range(len(self.x)))
        write_csv(path, ["t", "x", "u", "regime"], rows)


def solve_pidvi(
    problem: PideProblem,
    grid: PideGrid,
    driver_shift=None,
    terminal_shift=None,
    fp_tol: float = 1e-13,
    fp_maxiter: int = 200,
) -> PideSolution:
    """Backward explicit stepping with clamping into ``[h1, h2]``.

    ``driver_shift`` adds a field to ``f`` (scalar, ``(M,)`` or ``(N_t, M)`` with
    row ``n`` used on the step ending at level ``n``); ``terminal_shift`` adds
    to ``g``.
    """
    st = discretize_operators(problem, grid)
    if grid.N_t is None:
        N_t = max(1, int(math.ceil(problem.T / (grid.cfl * st.dt_max))))
    else:
        N_t = int(grid.N_t)
    dt = problem.T / N_t
    if dt > st.dt_max * (1 + 1e-12):
        raise CflViolated(f"dt = {dt:g} exceeds the monotone limit {st.dt_max:g}")
    x = grid.x
    t = np.linspace(0.0, problem.T, N_t + 1)
    u = np.empty((N_t + 1, grid.M))
    labels = np.zeros((N_t + 1, grid.M), dtype=np.int8)
    g = np.asarray(problem.terminal(x), dtype=float) * np.ones_like(x)
    if terminal_shift is not None:
        g = g + terminal_shift
    h1T = problem.h1(t[-1], x) * np.ones_like(x)
    h2T = problem.h2(t[-1], x) * np.ones_like(x)
    if np.any(g < h1T - 1e-12) or np.any(g > h2T + 1e-12):
        raise ConfigError("terminal condition must lie between the obstacles at T")
    u[-1] = g
    f = problem.driver
    shift = 0.0 if driver_shift is None else np.asarray(driver_shift, dtype=float)
    worst_res = 0.0
    for n in range(N_t - 1, -1, -1):
        nxt = u[n + 1]
        explicit = nxt + dt * st.apply_L(nxt)
        z = st.z_of(nxt)
        q = st.apply_B(nxt)
        s = shift[n] if np.ndim(shift) == 2 else shift
        cand = explicit.copy()
        for _ in range(fp_maxiter):
            new = explicit + dt * (f(cand, z, q) + s)
            if np.max(np.abs(new - cand)) <= fp_tol * max(1.0, float(np.max(np.abs(new)))):
                cand = new
                break
            cand = new
        else:
            raise NonConvergence("implicit driver step did not converge")
        # zero-gradient boundary (keeps the step monotone)
        cand[0] = cand[1]
        cand[-1] = cand[-2]
        lo = problem.h1(t[n], x) * np.ones_like(x)
        hi = problem.h2(t[n], x) * np.ones_like(x)
        val = np.minimum(hi, np.maximum(lo, cand))
        lab = np.full(grid.M, LABEL_INTERIOR, dtype=np.int8)
        lab[cand < lo] = LABEL_LOWER
        lab[cand > hi] = LABEL_UPPER
        inner = lab[1:-1] == LABEL_INTERIOR
        res = (cand - nxt) / dt - st.apply_L(nxt) - (f(cand, z, q) + s)
        if np.any(inner):
            worst_res = max(worst_res, float(np.max(np.abs(res[1:-1][inner]))))
        u[n] = val
        labels[n] = lab
    return PideSolution(x, t, u, labels, dt / st.dt_max, worst_res)


# ---------------------------------------------------------------------------
# lattice cross-validation


def lattice_value(problem: PideProblem, N: int, x0: float, max_nodes: int = DEFAULT_MAX_NODES) -> float:
    """``Y_0`` of the DRBSDE on a lattice started at ``x0`` with obstacles along the state."""
    sde = problem.sde
    grid = TimeGrid(problem.T, N)
    if sde.state_independent:
        lat = build_recombining(grid, sde.marks, sde=sde, x0=x0, max_nodes=max_nodes)
    else:
        lat = build_tree(grid, sde.marks, sde=sde, x0=x0, max_nodes=max_nodes)
    xi, zeta = obstacle_on_lattice(lat, problem.h1, problem.h2, problem.terminal)
    return float(solve_drbsde_dp(lat, problem.lattice_driver(), xi, zeta).Y[0])


def crossvalidate_markovian(
    problem: PideProblem,
    N: int,
    grid: PideGrid,
    xs: Sequence[float] = (0.0,),
    max_nodes: int = 1_000_000,
    solution: Optional[PideSolution] = None,
) -> dict:
    """Gap between the finite-difference value and the lattice value at ``t = 0``."""
    sol = solution if solution is not None else solve_pidvi(problem, grid)
    rows = []
    for x0 in xs:
        y = lattice_value(problem, N, float(x0), max_nodes=max_nodes)
        u = float(sol.at(0, x0))
        rows.append({"x": float(x0), "lattice": y, "fd": u, "gap": abs(u - y)})
    return {"points": rows, "max_gap": max(r["gap"] for r in rows), "N": N, "M": grid.M,
            "fd_steps": len(sol.t) - 1}


def check_discrete_comparison_principle(problem: PideProblem, grid: PideGrid, perturbation, tol: float = 1e-10) -> dict:
    """Solve with ``f - p`` and ``f + p`` (``p >= 0``) and report ``max(U - V)``."""
    p = np.asarray(perturbation, dtype=float)
    if np.any(p < 0):
        raise ConfigError("perturbation must be nonnegative")
    U = solve_pidvi(problem, grid, driver_shift=-p)
    V = solve_pidvi(problem, grid, driver_shift=p)
    worst = float(np.max(U.u - V.u))
    return {"max_violation": worst, "ok": worst <= tol}


def check_terminal_monotonicity(problem: PideProblem, grid: PideGrid, bump, tol: float = 1e-12) -> dict:
    """Raising ``g`` by a nonnegative ``bump`` must not lower ``u`` anywhere."""
    bump = np.asarray(bump, dtype=float)
    base = solve_pidvi(problem, grid)
    up = solve_pidvi(problem, grid, terminal_shift=bump)
    worst = float(np.max(base.u - up.u))
    return {"max_violation": worst, "ok": worst <= tol}


def problem_from_config(cfg: dict) -> tuple:
    """``(PideProblem, PideGrid, lattice N, x points)`` from a JSON config."""
    try:
        marks_cfg = cfg.get("marks", [])
        marks = MarkSpace(tuple(float(mk["e"]) for mk in marks_cfg), tuple(float(mk["nu"]) for mk in marks_cfg))
        s = cfg.get("sde", {})
        sde = SdeSpec(marks, float(s.get("b0", 0.0)), float(s.get("b1", 0.0)), float(s.get("s0", 1.0)),
                      float(s.get("s1", 0.0)), float(s.get("jscale", 1.0)), float(s.get("jx", 0.0)))
        d = cfg.get("driver", {})
        drv = PideDriver(float(d.get("y", 0.0)), float(d.get("z", 0.0)), float(d.get("q", 0.0)), float(d.get("const", 0.0)))
        h1 = fn_from_config(cfg["h1"])
        h2 = fn_from_config(cfg["h2"])
        gfn = fn_from_config(cfg["terminal"])
        problem = PideProblem(sde, h1, h2, lambda x: gfn(0.0, x), float(cfg.get("T", 1.0)), drv,
                              float(cfg.get("gamma_scale", 0.0)))
        gcfg = cfg.get("grid", {})
        grid = PideGrid(float(gcfg.get("x_min", -6.0)), float(gcfg.get("x_max", 6.0)), int(gcfg.get("M", 200)),
                        gcfg.get("N_t"), float(gcfg.get("cfl", 0.9)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad pide config: {exc}") from None
    return problem, grid, int(cfg.get("lattice_N", 64)), [float(v) for v in cfg.get("x_points", [0.0])]
