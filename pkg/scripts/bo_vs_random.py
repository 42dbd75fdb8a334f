"""Constrained bi-objective BO against budget-matched random search on a synthetic problem with a known front."""

import argparse
import sys
from pathlib import Path

import numpy as np

from bayeslora.hpo import DEFAULT_BOUNDS, run_bo, run_random

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import biobjective_problem  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--n-init", type=int, default=5)
    args = ap.parse_args()
    ref = np.array([-2.0, -2.0])
    names = ("f1", "f2")
    wins = 0
    for seed in range(args.seeds):
        bo = run_bo(biobjective_problem, DEFAULT_BOUNDS, args.rounds, args.n_init, seed, objective_names=names)
        rs = run_random(biobjective_problem, DEFAULT_BOUNDS, args.rounds + args.n_init, seed, objective_names=names)
        a, b = bo.hypervolume(ref), rs.hypervolume(ref)
        wins += a > b
        print(f"seed {seed}: BO HV {a:.4f}  random HV {b:.4f}")
    print(f"BO ahead in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
