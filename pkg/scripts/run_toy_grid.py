"""Train MAP-LoRA, the degenerate preset and Bayesian-LoRA over several seeds; print median ID/OOD metrics."""

import argparse
import json

import torch

from bayeslora.elbo import TrainConfig
from bayeslora.models import MethodSpec
from bayeslora.toybench import METRIC_FIELDS, SyntheticTask, median_by, records_csv, run_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--task", default="{}", help="JSON overrides for SyntheticTask")
    ap.add_argument("--csv", help="write per-seed records here")
    args = ap.parse_args()
    torch.set_num_threads(1)
    task = SyntheticTask(**json.loads(args.task))
    methods = [MethodSpec("map_lora"), MethodSpec("degenerate"), MethodSpec("bayes_lora")]
    records, _ = run_grid(task, methods, range(args.seeds), TrainConfig(epochs=args.epochs))
    for m in methods:
        for split in ("id", "ood"):
            vals = "  ".join(f"{k}={median_by(records, m.label, split, k):.4f}" for k in ("acc", "ece", "nll", "brier"))
            print(f"{m.label:26s} {split:4s} {vals}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(records_csv(records, METRIC_FIELDS))


if __name__ == "__main__":
    main()
