"""Run every example config through the CLI and summarize exit codes.

    python scripts/run_configs.py [--out runs]
"""
import argparse
from pathlib import Path

from dynkin.cli import run

ROOT = Path(__file__).resolve().parents[1]
JOBS = [
    ("drbsde", "drbsde_jump"),
    ("game", "one_step_game"),
    ("game", "game_jump"),
    ("snell", "snell"),
    ("mixed-game", "mixed_game"),
    ("comparison-harness", "comparison_harness"),
    ("estimate-harness", "estimate_harness"),
    ("pide", "pide_nojump"),
    ("crossvalidate", "pide_nojump"),
    ("crossvalidate", "pide_jump"),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs")
    args = parser.parse_args()
    worst = 0
    for sub, name in JOBS:
        out = Path(args.out) / f"{sub}-{name}"
        code = run([sub, "--config", str(ROOT / "configs" / f"{name}.json"), "--out", str(out)])
        print(f"{sub:20s} {name:20s} exit={code}  -> {out}")
        worst = max(worst, code)
    raise SystemExit(worst)


if __name__ == "__main__":
    main()
