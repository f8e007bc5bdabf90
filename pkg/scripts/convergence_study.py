"""Finite-difference vs lattice gap under successive refinement.

    python scripts/convergence_study.py [--levels 3] [--jump]
"""
import argparse
import time

import numpy as np

from dynkin.model import MarkSpace
from dynkin.pide import PideGrid, PideProblem, SdeSpec, crossvalidate_markovian


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--levels", type=int, default=3)
    parser.add_argument("--jump", action="store_true", help="add one mark atom e=0.3, nu=1")
    parser.add_argument("--N", type=int, default=32, help="coarsest tree steps")
    parser.add_argument("--M", type=int, default=100, help="coarsest space points")
    args = parser.parse_args()
    marks = MarkSpace((0.3,), (1.0,)) if args.jump else MarkSpace.none()
    const = lambda v: (lambda t, x: np.full(np.shape(x), v))
    prob = PideProblem(SdeSpec(marks), const(-1.0), const(1.0), np.tanh, 1.0)
    xs = (-1.0, -0.5, 0.0, 0.3, 0.5, 1.0)
    print(f"{'N':>5} {'M':>5} {'max gap':>12} {'seconds':>8}")
    prev = None
    for lvl in range(args.levels):
        N, M = args.N * 2**lvl, args.M * 2**lvl
        t0 = time.perf_counter()
        rep = crossvalidate_markovian(prob, N, PideGrid(-6.0, 6.0, M), xs, max_nodes=5_000_000)
        gap = rep["max_gap"]
        rate = f"  ratio {prev / gap:.2f}" if prev else ""
        print(f"{N:5d} {M:5d} {gap:12.3e} {time.perf_counter() - t0:8.2f}{rate}")
        prev = gap


if __name__ == "__main__":
    main()
