"""Command-line experiment runner.

    dynkin <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--force]

Exit codes: 0 success, 1 config or solver error, 2 property violation (a
``replay.json`` with a self-contained config is written next to the report).
Random instances use numpy's PCG64 generator seeded with ``--seed`` (or the
config's ``seed`` field, default 0).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, drbsde, games, instances, pide
from .configs import obstacles_from_config, problem_from_config
from .drivers import ProcessDriver, driver_from_config
from .errors import (
    DynkinError,
    IsaacsViolated,
    MonotonicityViolated,
    SaddleViolation,
)
from .io import dumps_line, read_json, write_json
from .model import build_lattice

SUBCOMMANDS = ("drbsde", "game", "mixed-game", "comparison-harness", "estimate-harness", "pide", "crossvalidate", "snell")
PROPERTY_ERRORS = (SaddleViolation, MonotonicityViolated, IsaacsViolated)


class PropertyViolation(Exception):
    def __init__(self, message, replay):
        super().__init__(message)
        self.replay = replay


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


# ---------------------------------------------------------------------------
# subcommands


def run_drbsde(cfg, args, out: Path):
    prob = problem_from_config(cfg)
    sol = drbsde.solve_drbsde_dp(prob.lattice, prob.driver, prob.xi, prob.zeta)
    report = {"kind": "drbsde", "Y0": sol.Y[0], "invariants": sol.invariant_violations(),
              "dynamics_residual": sol.dynamics_residual(), "projection_residual": sol.residual}
    if cfg.get("picard", True):
        pic = drbsde.solve_drbsde_picard(prob.lattice, prob.driver, prob.xi, prob.zeta, tol=float(cfg.get("tol", 1e-11)))
        report["picard_sweeps"] = pic.sweeps
        report["picard_gap"] = float(np.max(np.abs(pic.Y - sol.Y)))
    sol.write_csv(out / "solution.csv")
    write_json(out / "report.json", report)
    if any(report["invariants"].values()):
        raise PropertyViolation("DRBSDE invariants violated", {"kind": "drbsde", **prob.replay_config()})
    return report


def _process_values(prob, cfg):
    if isinstance(prob.driver, ProcessDriver):
        return np.asarray(prob.driver.values, float)
    if "g_process" in cfg:
        return np.asarray(cfg["g_process"], float)
    if prob.driver.depends_on_solution:
        raise DynkinError("the Snell system needs a driver process (form 'process' or 'zero')")
    n = prob.lattice.n_nodes
    return prob.driver(prob.lattice.times, np.zeros(n), np.zeros(n), np.zeros((n, prob.lattice.m)), np.arange(n))


def run_snell(cfg, args, out: Path):
    prob = problem_from_config(cfg)
    lat = prob.lattice
    g = _process_values(prob, cfg)
    pair = drbsde.solve_snell_system(lat, g, prob.xi, prob.zeta)
    sol = drbsde.solve_drbsde_dp(lat, ProcessDriver(g, lat.marks), prob.xi, prob.zeta)
    H, Hp = drbsde.mokobodski_witnesses(lat, g, prob.xi, prob.zeta, sol)
    monotone = all(np.all(b[0] >= a[0]) and np.all(b[1] >= a[1]) for a, b in zip(pair.history, pair.history[1:]))
    band = bool(np.all(pair.xi_t <= H - Hp + 1e-12) and np.all(H - Hp <= pair.zeta_t + 1e-12))
    report = {
        "kind": "snell",
        "iterations": pair.iterations,
        "J0": pair.J[0],
        "Jprime0": pair.Jp[0],
        "Ybar0": pair.Y[0],
        "reconstruction_gap": float(np.max(np.abs(pair.Y - sol.Y))),
        "iteration_monotone": monotone,
        "witness_band_ok": band,
        "witness_supermartingales": drbsde.is_supermartingale(lat, H) and drbsde.is_supermartingale(lat, Hp),
        "witness_minus_snell": float(max(np.max(np.abs(H - pair.J)), np.max(np.abs(Hp - pair.Jp)))),
    }
    sol.write_csv(out / "solution.csv")
    write_json(out / "report.json", report)
    if report["reconstruction_gap"] > 1e-10 or not (monotone and band and report["witness_supermartingales"]):
        raise PropertyViolation("Snell reconstruction check failed", {"kind": "snell", **prob.replay_config()})
    return report


def run_game(cfg, args, out: Path):
    prob = problem_from_config(cfg)
    lat = prob.lattice
    replay = {"kind": "game", **prob.replay_config()}
    if not args.force:
        try:
            games.assumption_check(lat, prob.driver, int(cfg.get("n_samples", 2000)), _seed(args, cfg))
        except MonotonicityViolated as exc:
            raise PropertyViolation(f"driver fails the monotonicity check: {exc}", {**replay, "sample": exc.sample}) from None
    caps = cfg.get("caps", {})
    icap = int(caps.get("interior_nodes", games.DEFAULT_INTERIOR_CAP))
    pcap = int(caps.get("pairs", games.DEFAULT_PAIR_CAP))
    sol = drbsde.solve_drbsde_dp(lat, prob.driver, prob.xi, prob.zeta)
    rep = games.game_values_bruteforce(lat, prob.driver, prob.xi, prob.zeta, solution=sol,
                                       interior_cap=icap, pair_cap=pcap)
    eps = [float(e) for e in cfg.get("eps", [1e-2, 1e-3])]
    S = int(cfg.get("S", 0))
    saddle = games.extract_saddle(lat, sol, prob.driver, S, eps_list=eps, raise_on_fail=False)
    report = {"kind": "game", "value": sol.Y[S], "upper": rep.upper[S], "lower": rep.lower[S],
              "value_exists": rep.value_exists, "max_gap": rep.max_gap, "saddle": saddle.to_dict(),
              "nodes": rep.to_dict()}
    sol.write_csv(out / "solution.csv")
    write_json(out / "report.json", report)
    if rep.max_gap > 1e-9 or not saddle.verified or any(not e["ok"] for e in saddle.eps_reports):
        raise PropertyViolation("game value or saddle check failed", replay)
    return report


def run_mixed_game(cfg, args, out: Path):
    lat = build_lattice(cfg["model"])
    mixed = games.mixed_spec_from_config(cfg["mixed"], lat.marks)
    xi, zeta = obstacles_from_config(lat, cfg["obstacles"])
    rep = games.solve_mixed_game(lat, mixed, xi, zeta, brute_force=bool(cfg.get("brute_force", True)))
    rng = np.random.default_rng(_seed(args, cfg))
    n = lat.n_nodes
    k = int(cfg.get("sandwich_samples", 10))
    us = [np.full(n, u) for u in range(len(mixed.U))] + [rng.integers(0, len(mixed.U), n) for _ in range(k)]
    vs = [np.full(n, v) for v in range(len(mixed.V))] + [rng.integers(0, len(mixed.V), n) for _ in range(k)]
    sandwich, selected_gap = games.check_sandwich(lat, mixed, xi, zeta, rep, us, vs)
    report = {"kind": "mixed-game", "value": rep.solution.Y[0], "isaacs_ok": rep.isaacs_ok,
              "isaacs_gap": rep.isaacs_gap, "u_star": rep.u_star, "v_star": rep.v_star,
              "sandwich_violation": sandwich, "selected_vs_supinf": selected_gap}
    if rep.game is not None:
        report.update({"upper": rep.game.upper[0], "lower": rep.game.lower[0], "max_gap": rep.game.max_gap})
    if rep.saddle is not None:
        report["saddle"] = rep.saddle.to_dict()
    rep.solution.write_csv(out / "solution.csv")
    write_json(out / "report.json", report)
    replay = {"kind": "mixed-game", "model": cfg["model"], "mixed": cfg["mixed"],
              "obstacles": {"xi": xi.tolist(), "zeta": zeta.tolist()}}
    bad = (not rep.isaacs_ok or sandwich > 1e-10
           or (rep.game is not None and rep.game.max_gap > 1e-9))
    if bad:
        raise PropertyViolation("mixed game check failed", replay)
    return report


def _pair_from_config(pc):
    lat = build_lattice(pc["model"])
    g1 = driver_from_config(pc["g1"], lat.marks)
    g2 = driver_from_config(pc["g2"], lat.marks)
    x1, z1 = obstacles_from_config(lat, pc["obstacles1"])
    x2, z2 = obstacles_from_config(lat, pc["obstacles2"])
    cert = pc.get("certificates", {"g": True, "xi": True, "zeta": True})
    return analysis.ComparisonInstance(lat, g1, x1, z1, g2, x2, z2, cert)


def _pair_config(inst):
    return {"model": instances.model_of(inst.lattice), "g1": inst.g1.to_config(), "g2": inst.g2.to_config(),
            "obstacles1": {"xi": inst.xi1.tolist(), "zeta": inst.zeta1.tolist()},
            "obstacles2": {"xi": inst.xi2.tolist(), "zeta": inst.zeta2.tolist()},
            "certificates": dict(inst.certificates)}


def run_comparison_harness(cfg, args, out: Path):
    rng = np.random.default_rng(_seed(args, cfg))
    lines, failures = [], []
    if "pairs" in cfg:
        pairs = [_pair_from_config(pc) for pc in cfg["pairs"]]
    else:
        pairs = [instances.ordered_pair(rng, int(cfg.get("N_max", 6)), int(cfg.get("m_max", 2)))
                 for _ in range(int(cfg.get("instances", 100)))]
    for i, inst in enumerate(pairs):
        rep = analysis.check_comparison(inst)
        lines.append({"instance": i, "test": "comparison", **rep})
        if not rep["ok"]:
            failures.append(_pair_config(inst))
    for i in range(int(cfg.get("strict_instances", 20))):
        inst, expected = instances.strict_comparison_instance(rng, N=int(rng.integers(2, 5)), m=int(rng.integers(0, 2)))
        rep = analysis.check_strict_comparison(inst)
        got = np.zeros_like(expected)
        got[rep["theta_bar"]] = True
        rep["matches_construction"] = bool(np.array_equal(got, expected))
        lines.append({"instance": i, "test": "strict", **rep})
        if not (rep["equality_ok"] and rep["driver_ok"] and rep["matches_construction"]):
            failures.append(_pair_config(inst))
    _write_jsonl(out / "harness.jsonl", lines)
    report = {"kind": "comparison-harness", "instances": len(lines), "violations": len(failures)}
    write_json(out / "report.json", report)
    if failures:
        raise PropertyViolation("comparison violated", {"kind": "comparison-harness", "pairs": failures[:1], "strict_instances": 0})
    return report


def run_estimate_harness(cfg, args, out: Path):
    params = analysis.EstimateParams(float(cfg.get("C", 1.0)), float(cfg.get("eta", 1.0)), float(cfg.get("beta", 5.0)))
    rng = np.random.default_rng(_seed(args, cfg))
    lines, failures = [], []
    for i in range(int(cfg.get("instances", 100))):
        inst = instances.perturbed_pair(rng, int(cfg.get("N_max", 6)), int(cfg.get("m_max", 2)))
        rep = analysis.check_apriori_estimate(inst, params)
        single = analysis.check_single_bound(inst.lattice, inst.g1, inst.xi1, inst.zeta1, params)
        lines.append({"instance": i, **rep, "single_ok": single["ok"]})
        if not (rep["ok"] and single["ok"]):
            failures.append(_pair_config(inst))
    _write_jsonl(out / "harness.jsonl", lines)
    report = {"kind": "estimate-harness", "instances": len(lines), "violations": len(failures),
              "params": {"C": params.C, "eta": params.eta, "beta": params.beta}}
    write_json(out / "report.json", report)
    if failures:
        raise PropertyViolation("estimate violated", {"kind": "estimate-harness", "failing_pair": failures[0]})
    return report


def run_pide(cfg, args, out: Path):
    problem, grid, _, xs = pide.problem_from_config(cfg)
    sol = pide.solve_pidvi(problem, grid)
    counts = {name: int(np.sum(sol.labels == lab)) for name, lab in
              (("interior", pide.LABEL_INTERIOR), ("lower", pide.LABEL_LOWER), ("upper", pide.LABEL_UPPER))}
    report = {"kind": "pide", "u0": {str(x): float(sol.at(0, x)) for x in xs}, "cfl_ratio": sol.cfl_ratio,
              "interior_residual": sol.interior_residual, "regimes": counts, "steps": len(sol.t) - 1}
    pert = cfg.get("comparison_perturbation")
    if pert is not None:
        report["comparison"] = pide.check_discrete_comparison_principle(problem, grid, float(pert))
    sol.write_csv(out / "solution.csv")
    write_json(out / "report.json", report)
    if sol.interior_residual > 1e-8 or (pert is not None and not report["comparison"]["ok"]):
        raise PropertyViolation("PIDE scheme check failed", {"kind": "pide", **cfg})
    return report


def run_crossvalidate(cfg, args, out: Path):
    problem, grid, N, xs = pide.problem_from_config(cfg)
    rep = pide.crossvalidate_markovian(problem, N, grid, xs)
    report = {"kind": "crossvalidate", "coarse": rep}
    if cfg.get("refine", False):
        fine = pide.PideGrid(grid.x_min, grid.x_max, 2 * grid.M, None, grid.cfl)
        report["fine"] = pide.crossvalidate_markovian(problem, 2 * N, fine, xs)
        report["gap_shrinks"] = report["fine"]["max_gap"] < rep["max_gap"]
    write_json(out / "report.json", report)
    tol = float(cfg.get("tolerance", 5e-2))
    if rep["max_gap"] > tol or not report.get("gap_shrinks", True):
        raise PropertyViolation("cross-validation gap too large", {"kind": "crossvalidate", **cfg})
    return report


def _write_jsonl(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(dumps_line(line) + "\n")


RUNNERS = {
    "drbsde": run_drbsde,
    "game": run_game,
    "mixed-game": run_mixed_game,
    "comparison-harness": run_comparison_harness,
    "estimate-harness": run_estimate_harness,
    "pide": run_pide,
    "crossvalidate": run_crossvalidate,
    "snell": run_snell,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynkin", description="DRBSDE / Dynkin game laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (PCG64)")
        p.add_argument("--force", action="store_true", help="skip the driver monotonicity gate")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = read_json(args.config)
        if not isinstance(cfg, dict):
            raise DynkinError("config must be a JSON object")
        out.mkdir(parents=True, exist_ok=True)
        RUNNERS[args.command](cfg, args, out)
    except PropertyViolation as exc:
        replay = dict(exc.replay)
        replay.setdefault("seed", _seed(args, cfg))
        write_json(out / "replay.json", replay)
        print(f"property violation: {exc}; replay written to {out / 'replay.json'}", file=sys.stderr)
        return 2
    except PROPERTY_ERRORS as exc:
        print(f"property violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        write_json(out / "replay.json", {"kind": args.command, "config": cfg, "seed": _seed(args, cfg)})
        return 2
    except (DynkinError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
