"""Predictive-sample sweep on a trained Bayesian-LoRA model: OOD metrics and wall time per S."""

import argparse
from dataclasses import replace

import torch

from bayeslora.elbo import TrainConfig
from bayeslora.metrics import linear_fit_r2, mc_sweep
from bayeslora.models import MethodSpec
from bayeslora.toybench import SyntheticTask, base_model_for, fit_method, make_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-s", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    torch.set_num_threads(1)
    bundle = make_task(replace(SyntheticTask(), seed=args.seed))
    base, _ = base_model_for(bundle)
    res = fit_method(base, bundle, MethodSpec("bayes_lora"), TrainConfig(seed=args.seed))
    s_values = list(range(1, args.max_s + 1))
    rows = mc_sweep(res.model, bundle.ood.x, bundle.ood.y, s_values, seed=args.seed, repeats=args.repeats)
    print(f"{'S':>3} {'acc':>7} {'nll':>8} {'ece':>7} {'ms':>8}")
    for r in rows:
        print(f"{r.s:3d} {r.acc:7.4f} {r.nll:8.4f} {r.ece:7.4f} {1e3 * r.wall_time:8.2f}")
    print("wall-time linear fit R^2:", round(linear_fit_r2(s_values, [r.wall_time for r in rows]), 4))


if __name__ == "__main__":
    main()
