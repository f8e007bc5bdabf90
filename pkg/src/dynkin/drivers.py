"""Driver catalog g(t, y, z, k) with Lipschitz and monotonicity metadata.

All drivers are evaluated vectorized: ``y`` and ``z`` have shape ``(n,)`` and
``k`` has shape ``(n, m)``.  ``nodes`` carries the global node indices being
evaluated, which process-type drivers use to look up their values.

Each driver also reports bounds on its partial slopes: ``y_bounds``,
``z_bounds`` and per-mark ``gamma_bounds``.  ``gamma`` is the coefficient in
the ``<gamma, k>_nu`` representation, so a driver ``c * nu_i * tanh(k_i)`` has
gamma slope ``c * sech(k_i)**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MonotonicityViolated, UnknownCatalogId
from .model import MarkSpace

FD_STEP = 1e-7
CATALOG_IDS = ("k-positive-part", "smooth", "sup-inf")


class Driver:
    """Base class; subclasses implement ``_eval`` and slope metadata."""

    marks: MarkSpace
    depends_on_solution = True

    def __call__(self, t, y, z, k, nodes=None, x=None):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        k = np.asarray(k, dtype=float).reshape(y.shape + (self.marks.m,))
        return self._eval(t, y, z, k, nodes, x)

    def scalar(self, y, z, k, t=0.0, node=None):
        """Convenience single-point evaluation."""
        nodes = None if node is None else np.array([node])
        k = np.asarray(k, dtype=float).reshape(1, self.marks.m)
        return float(self(t, np.array([y], float), np.array([z], float), k, nodes)[0])

    @property
    def y_lip(self) -> float:
        lo, hi = self.y_bounds
        return max(abs(lo), abs(hi))

    @property
    def lipschitz_C(self) -> float:
        zlo, zhi = self.z_bounds
        glo, ghi = self.gamma_bounds
        gmax = np.maximum(np.abs(glo), np.abs(ghi))
        # |<g, dk>_nu| <= ||g||_nu ||dk||_nu
        kl = float(np.sqrt(np.sum(gmax**2 * self.marks.nu)))
        return max(self.y_lip, abs(zlo), abs(zhi), kl)

    @property
    def psi_bound(self) -> np.ndarray:
        glo, ghi = self.gamma_bounds
        return np.maximum(np.abs(glo), np.abs(ghi))

    @property
    def y_bounds(self):
        return (0.0, 0.0)

    @property
    def z_bounds(self):
        return (0.0, 0.0)

    @property
    def gamma_bounds(self):
        m = self.marks.m
        return (np.zeros(m), np.zeros(m))


@dataclass(frozen=True, eq=False)
class ZeroDriver(Driver):
    marks: MarkSpace = field(default_factory=MarkSpace.none)
    depends_on_solution = False

    def _eval(self, t, y, z, k, nodes, x):
        return np.zeros_like(y)

    def to_config(self):
        return {"form": "zero"}


@dataclass(frozen=True, eq=False)
class ProcessDriver(Driver):
    """Driver process ``g_t(omega)``: one value per lattice node."""

    values: np.ndarray
    marks: MarkSpace = field(default_factory=MarkSpace.none)
    depends_on_solution = False

    def _eval(self, t, y, z, k, nodes, x):
        if nodes is None:
            raise ConfigError("process drivers need node indices")
        return np.asarray(self.values, dtype=float)[nodes]

    def to_config(self):
        return {"form": "process", "values": [float(v) for v in self.values]}


@dataclass(frozen=True, eq=False)
class LinearDriver(Driver):
    """``beta*y + theta*z + <gamma, k>_nu + c``."""

    beta: float
    gamma: tuple
    c: float
    marks: MarkSpace
    theta: float = 0.0

    def __post_init__(self):
        g = tuple(float(v) for v in self.gamma)
        if len(g) != self.marks.m:
            raise ConfigError(f"gamma needs {self.marks.m} entries, got {len(g)}")
        object.__setattr__(self, "gamma", g)

    def _eval(self, t, y, z, k, nodes, x):
        return self.beta * y + self.theta * z + k @ (np.asarray(self.gamma) * self.marks.nu) + self.c

    @property
    def y_bounds(self):
        return (self.beta, self.beta)

    @property
    def z_bounds(self):
        return (self.theta, self.theta)

    @property
    def gamma_bounds(self):
        g = np.asarray(self.gamma, dtype=float)
        return (g, g.copy())

    def to_config(self):
        return {
            "form": "linear",
            "beta": self.beta,
            "theta": self.theta,
            "gamma": list(self.gamma),
            "c": self.c,
        }


@dataclass(frozen=True, eq=False)
class PositivePartDriver(Driver):
    """``scale * sum_i nu_i max(k_i, 0)``; not differentiable at ``k_i = 0``."""

    scale: float
    marks: MarkSpace

    def _eval(self, t, y, z, k, nodes, x):
        return self.scale * (np.maximum(k, 0.0) @ self.marks.nu)

    @property
    def gamma_bounds(self):
        m = self.marks.m
        lo = np.full(m, min(0.0, self.scale))
        hi = np.full(m, max(0.0, self.scale))
        return (lo, hi)

    def to_config(self):
        return {"form": "catalog", "id": "k-positive-part", "params": {"scale": self.scale}}


@dataclass(frozen=True, eq=False)
class SmoothDriver(Driver):
    """``a*sin(y) + b*tanh(z) + c*sum_i nu_i tanh(k_i) + d``."""

    a: float
    b: float
    c: float
    d: float
    marks: MarkSpace

    def _eval(self, t, y, z, k, nodes, x):
        return self.a * np.sin(y) + self.b * np.tanh(z) + self.c * (np.tanh(k) @ self.marks.nu) + self.d

    def analytic_gamma(self, k):
        """Gradient in ``k`` divided by ``nu``: ``c * sech(k)**2``."""
        return self.c / np.cosh(np.asarray(k, dtype=float)) ** 2

    @property
    def y_bounds(self):
        return (-abs(self.a), abs(self.a))

    @property
    def z_bounds(self):
        return (min(0.0, self.b), max(0.0, self.b))

    @property
    def gamma_bounds(self):
        m = self.marks.m
        return (np.full(m, min(0.0, self.c)), np.full(m, max(0.0, self.c)))

    def to_config(self):
        return {
            "form": "catalog",
            "id": "smooth",
            "params": {"a": self.a, "b": self.b, "c": self.c, "d": self.d},
        }


@dataclass(frozen=True, eq=False)
class SupInfDriver(Driver):
    """``max_u min_v F[u][v](t, y, z, k)`` over finite control sets."""

    family: tuple
    marks: MarkSpace

    def __post_init__(self):
        fam = tuple(tuple(row) for row in self.family)
        if not fam or not fam[0] or any(len(r) != len(fam[0]) for r in fam):
            raise ConfigError("sup-inf family must be a non-empty rectangular table")
        object.__setattr__(self, "family", fam)

    @property
    def shape(self):
        return (len(self.family), len(self.family[0]))

    def table(self, t, y, z, k, nodes=None, x=None) -> np.ndarray:
        """All family values, shape ``(|U|, |V|, n)``."""
        return np.stack([np.stack([F(t, y, z, k, nodes, x) for F in row]) for row in self.family])

    def _eval(self, t, y, z, k, nodes, x):
        return self.table(t, y, z, k, nodes, x).min(axis=1).max(axis=0)

    def _members(self):
        return [F for row in self.family for F in row]

    @property
    def y_bounds(self):
        bs = [F.y_bounds for F in self._members()]
        return (min(b[0] for b in bs), max(b[1] for b in bs))

    @property
    def z_bounds(self):
        bs = [F.z_bounds for F in self._members()]
        return (min(b[0] for b in bs), max(b[1] for b in bs))

    @property
    def gamma_bounds(self):
        bs = [F.gamma_bounds for F in self._members()]
        return (np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0))

    @property
    def lipschitz_C(self) -> float:
        return max(F.lipschitz_C for F in self._members())

    def to_config(self):
        return {
            "form": "catalog",
            "id": "sup-inf",
            "params": {"family": [[F.to_config() for F in row] for row in self.family]},
        }


@dataclass(frozen=True, eq=False)
class SelectedDriver(Driver):
    """Family member chosen per node: ``F[u[n]][v[n]]`` at node ``n``."""

    family: tuple
    u: np.ndarray
    v: np.ndarray
    marks: MarkSpace

    def _eval(self, t, y, z, k, nodes, x):
        if nodes is None:
            raise ConfigError("selected drivers need node indices")
        out = np.empty_like(y)
        uu = np.asarray(self.u)[nodes]
        vv = np.asarray(self.v)[nodes]
        for i, row in enumerate(self.family):
            for j, F in enumerate(row):
                sel = (uu == i) & (vv == j)
                if np.any(sel):
                    xs = None if x is None else np.asarray(x)[sel]
                    out[sel] = F(t, y[sel], z[sel], k[sel], nodes[sel], xs)
        return out

    def _members(self):
        return [F for row in self.family for F in row]

    y_bounds = SupInfDriver.y_bounds
    z_bounds = SupInfDriver.z_bounds
    gamma_bounds = SupInfDriver.gamma_bounds
    lipschitz_C = SupInfDriver.lipschitz_C


@dataclass(frozen=True, eq=False)
class ShiftedDriver(Driver):
    """``base + shift`` with a constant or per-node shift."""

    base: Driver
    shift: object
    marks: MarkSpace

    @property
    def depends_on_solution(self):
        return self.base.depends_on_solution

    def _shift(self, nodes, n):
        s = np.asarray(self.shift, dtype=float)
        if s.ndim == 0:
            return np.full(n, float(s))
        if nodes is None:
            raise ConfigError("per-node shifts need node indices")
        return s[nodes]

    def _eval(self, t, y, z, k, nodes, x):
        return self.base(t, y, z, k, nodes, x) + self._shift(nodes, y.shape[0])

    @property
    def y_bounds(self):
        return self.base.y_bounds

    @property
    def z_bounds(self):
        return self.base.z_bounds

    @property
    def gamma_bounds(self):
        return self.base.gamma_bounds

    @property
    def lipschitz_C(self):
        return self.base.lipschitz_C

    def to_config(self):
        s = np.asarray(self.shift, dtype=float)
        shift = float(s) if s.ndim == 0 else [float(v) for v in s]
        return {"form": "shifted", "base": self.base.to_config(), "shift": shift}


def driver_from_config(cfg: dict, marks: MarkSpace) -> Driver:
    """Build a driver from its JSON description."""
    if not isinstance(cfg, dict) or "form" not in cfg:
        raise ConfigError("driver config must be an object with a 'form' field")
    form = cfg["form"]
    try:
        if form == "zero":
            return ZeroDriver(marks)
        if form == "process":
            return ProcessDriver(np.asarray(cfg["values"], dtype=float), marks)
        if form == "linear":
            gamma = cfg.get("gamma", [0.0] * marks.m)
            return LinearDriver(
                float(cfg.get("beta", 0.0)),
                tuple(gamma),
                float(cfg.get("c", 0.0)),
                marks,
                theta=float(cfg.get("theta", 0.0)),
            )
        if form == "shifted":
            base = driver_from_config(cfg["base"], marks)
            return ShiftedDriver(base, cfg.get("shift", 0.0), marks)
        if form == "catalog":
            return _catalog(cfg.get("id"), cfg.get("params", {}), marks)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad driver config: {exc}") from None
    raise ConfigError(f"unknown driver form {form!r}")


def _catalog(cid, params, marks):
    if cid == "k-positive-part":
        return PositivePartDriver(float(params.get("scale", 1.0)), marks)
    if cid == "smooth":
        return SmoothDriver(
            float(params.get("a", 0.0)),
            float(params.get("b", 0.0)),
            float(params.get("c", 0.0)),
            float(params.get("d", 0.0)),
            marks,
        )
    if cid == "sup-inf":
        fam = [[driver_from_config(c, marks) for c in row] for row in params["family"]]
        return SupInfDriver(tuple(tuple(r) for r in fam), marks)
    raise UnknownCatalogId(f"unknown catalog id {cid!r}; known: {', '.join(CATALOG_IDS)}")


# ---------------------------------------------------------------------------
# monotonicity in k


@dataclass
class MonotonicityWitness:
    gammas: np.ndarray  # (n_samples, m)
    strict: bool
    max_residual: float
    psi: np.ndarray


def sample_points(rng: np.random.Generator, n: int, m: int, scale: float = 2.0) -> dict:
    """Random ``(t, y, z, k1, k2)`` samples for the monotonicity check."""
    return {
        "t": rng.uniform(0.0, 1.0, n),
        "y": rng.normal(0.0, scale, n),
        "z": rng.normal(0.0, scale, n),
        "k1": rng.normal(0.0, scale, (n, m)),
        "k2": rng.normal(0.0, scale, (n, m)),
    }


def fd_gamma(driver: Driver, t, y, z, k, nodes=None, h: float = 1e-6) -> np.ndarray:
    """Central difference quotients ``(g(k + h e_i) - g(k - h e_i)) / (2 h nu_i)``."""
    nu = driver.marks.nu
    k = np.asarray(k, dtype=float).reshape(len(np.atleast_1d(y)), driver.marks.m)
    out = np.zeros_like(k)
    for i in range(driver.marks.m):
        up, dn = k.copy(), k.copy()
        up[:, i] += h
        dn[:, i] -= h
        out[:, i] = (driver(t, y, z, up, nodes) - driver(t, y, z, dn, nodes)) / (2 * h * nu[i])
    return out


def check_monotonicity(driver: Driver, samples: dict, tol: float = 1e-10) -> MonotonicityWitness:
    """Find gamma with ``g(k1) - g(k2) >= <gamma, k1 - k2>_nu`` on every sample.

    Linear drivers get their constant gamma.  For other drivers two
    candidates are tried per sample: one-sided derivative quotients at ``k2``
    in the direction of ``k1`` (a supporting slope for convex drivers, so
    ``max(k, 0)`` gets slopes in ``{0, 1}``), and otherwise the chord
    quotients obtained by switching ``k2`` to ``k1`` one mark at a time, which
    reproduce ``g(k1) - g(k2)`` exactly.  Chord quotients over tiny steps are
    ill-conditioned and are clipped into the declared slope box.
    """
    marks = driver.marks
    nu = marks.nu
    m = marks.m
    t = np.asarray(samples["t"], dtype=float)
    y = np.asarray(samples["y"], dtype=float)
    z = np.asarray(samples["z"], dtype=float)
    k1 = np.asarray(samples["k1"], dtype=float).reshape(len(y), m)
    k2 = np.asarray(samples["k2"], dtype=float).reshape(len(y), m)
    nodes = samples.get("nodes")
    psi = driver.psi_bound
    n = len(y)
    if isinstance(driver, LinearDriver):
        gam = np.tile(np.asarray(driver.gamma, dtype=float), (n, 1))
    else:
        glo, ghi = driver.gamma_bounds
        chord = np.zeros((n, m))
        deriv = np.zeros((n, m))
        cur = k2.copy()
        prev = driver(t, y, z, cur, nodes)
        for i in range(m):
            dk = k1[:, i] - k2[:, i]
            h = FD_STEP * np.where(dk >= 0, 1.0, -1.0) * np.maximum(1.0, np.abs(k2[:, i]))
            bump = cur.copy()
            bump[:, i] += h
            deriv[:, i] = (driver(t, y, z, bump, nodes) - prev) / (nu[i] * h)
            cur[:, i] = k1[:, i]
            val = driver(t, y, z, cur, nodes)
            safe = np.abs(dk) > 1e-14
            chord[safe, i] = (val - prev)[safe] / (nu[i] * dk[safe])
            tiny = np.abs(dk) < 1e-6
            chord[tiny, i] = np.clip(chord[tiny, i], glo[i], ghi[i])
            prev = val
        deriv = np.clip(deriv, glo, ghi)
        deriv[np.abs(deriv) < FD_STEP] = 0.0
        deriv = np.where(np.abs(deriv - np.round(deriv)) < 1e-6, np.round(deriv), deriv)
        lhs0 = driver(t, y, z, k1, nodes) - driver(t, y, z, k2, nodes)
        ok = np.sum(deriv * (k1 - k2) * nu, axis=1) - lhs0 <= tol * (1.0 + np.abs(lhs0))
        gam = np.where(ok[:, None], deriv, chord)
    lhs = driver(t, y, z, k1, nodes) - driver(t, y, z, k2, nodes)
    rhs = np.sum(gam * (k1 - k2) * nu, axis=1)
    resid = rhs - lhs
    scale = 1.0 + np.abs(lhs)
    bad = np.nonzero((resid > tol * scale) | np.any(gam < -1 - tol, axis=1) | np.any(np.abs(gam) > psi + tol, axis=1))[0]
    if bad.size:
        j = int(bad[0])
        sample = {
            "t": float(t[j]),
            "y": float(y[j]),
            "z": float(z[j]),
            "k1": k1[j].tolist(),
            "k2": k2[j].tolist(),
            "gamma": gam[j].tolist(),
        }
        raise MonotonicityViolated(f"monotonicity in k fails at sample {j}: gamma={gam[j].tolist()}", sample)
    strict = bool(np.all(gam > -1.0)) if m else True
    return MonotonicityWitness(gam, strict, float(np.max(resid, initial=0.0)), psi)


def check_scheme_monotonicity(lattice, driver: Driver) -> float:
    """Smallest sensitivity of one implicit step to a child value.

    One step reads ``Y = E[v] + g(Y, Z(v), k(v)) dt`` with ``Z`` and ``k``
    linear in the child values ``v``.  The step is nondecreasing in ``v``
    when ``p_j + dt * (dg/dz * dZ/dv_j + sum_i gamma_i nu_i dk_i/dv_j) >= 0``
    for every branch and every admissible slope; the minimum over the slope
    box is returned.  Raises ``MonotonicityViolated`` if it is negative.
    """
    P = lattice.projector
    wz = P[1]
    wk = P[2:]
    zlo, zhi = driver.z_bounds
    glo, ghi = driver.gamma_bounds
    nu = lattice.marks.nu
    dt = lattice.dt
    zterm = np.minimum(zlo * wz, zhi * wz)
    kterm = np.zeros_like(wz)
    for i in range(lattice.m):
        kterm += np.minimum(glo[i] * nu[i] * wk[i], ghi[i] * nu[i] * wk[i])
    coef = lattice.prob + dt * (zterm + kterm)
    worst = float(coef.min())
    if worst < -1e-14:
        j = int(np.argmin(coef))
        raise MonotonicityViolated(
            f"one-step scheme is not monotone in child value on branch {j} (coefficient {worst:g})",
            {"branch": j, "coefficient": worst},
        )
    return worst
