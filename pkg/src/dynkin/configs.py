"""JSON problem configs: model + driver + obstacles.

Obstacle functions are small catalog entries of ``(t, x)``:

    {"kind": "const", "value": v}
    {"kind": "affine", "a": a, "b": b, "c": c}          a + b*x + c*t
    {"kind": "tanh", "scale": s, "shift": h}            s*tanh(x) + h
    {"kind": "gaussian", "scale": s, "width": w}        s*exp(-x^2 / (2 w^2))

An obstacle block is either ``{"lower": fn, "upper": fn, "terminal": fn}`` or
explicit per-node values ``{"xi": [...], "zeta": [...]}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .drivers import Driver, driver_from_config
from .errors import ConfigError
from .model import Lattice, build_lattice, obstacle_on_lattice, validate_obstacles


def fn_from_config(cfg) -> Callable:
    """Vectorized ``f(t, x)`` from a catalog entry (numbers mean constants)."""
    if isinstance(cfg, (int, float)):
        cfg = {"kind": "const", "value": float(cfg)}
    if not isinstance(cfg, dict):
        raise ConfigError(f"obstacle function must be a number or object, got {cfg!r}")
    kind = cfg.get("kind")
    try:
        if kind == "const":
            v = float(cfg["value"])
            return lambda t, x: np.full(np.shape(x), v)
        if kind == "affine":
            a, b, c = float(cfg.get("a", 0.0)), float(cfg.get("b", 0.0)), float(cfg.get("c", 0.0))
            return lambda t, x: a + b * np.asarray(x) + c * np.asarray(t)
        if kind == "tanh":
            s, h = float(cfg.get("scale", 1.0)), float(cfg.get("shift", 0.0))
            return lambda t, x: s * np.tanh(np.asarray(x)) + h
        if kind == "gaussian":
            s, w = float(cfg.get("scale", 1.0)), float(cfg.get("width", 1.0))
            return lambda t, x: s * np.exp(-np.asarray(x) ** 2 / (2 * w * w))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad obstacle function {cfg!r}: {exc}") from None
    raise ConfigError(f"unknown obstacle function kind {kind!r}")


def terminal_fn(cfg) -> Callable:
    f = fn_from_config(cfg)
    return lambda x: f(np.zeros_like(np.asarray(x, dtype=float)), x)


def obstacles_from_config(lattice: Lattice, cfg: dict):
    if not isinstance(cfg, dict):
        raise ConfigError("obstacles must be an object")
    if "xi" in cfg:
        return validate_obstacles(lattice, np.asarray(cfg["xi"], float), np.asarray(cfg["zeta"], float))
    try:
        lower = fn_from_config(cfg["lower"])
        upper = fn_from_config(cfg["upper"])
        term = terminal_fn(cfg["terminal"])
    except KeyError as exc:
        raise ConfigError(f"obstacle config missing {exc}") from None
    return obstacle_on_lattice(lattice, lower, upper, term)


@dataclass
class Problem:
    lattice: Lattice
    driver: Driver
    xi: np.ndarray
    zeta: np.ndarray
    config: dict

    def replay_config(self) -> dict:
        """Self-contained config with explicit obstacle values."""
        return {
            "model": self.config["model"],
            "driver": self.driver.to_config(),
            "obstacles": {"xi": self.xi.tolist(), "zeta": self.zeta.tolist()},
        }


def problem_from_config(cfg: dict) -> Problem:
    for key in ("model", "driver", "obstacles"):
        if key not in cfg:
            raise ConfigError(f"problem config missing {key!r}")
    lattice = build_lattice(cfg["model"])
    driver = driver_from_config(cfg["driver"], lattice.marks)
    xi, zeta = obstacles_from_config(lattice, cfg["obstacles"])
    return Problem(lattice, driver, xi, zeta, cfg)
