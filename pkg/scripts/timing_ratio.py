"""Per-step training cost of Bayesian-LoRA relative to MAP-LoRA on the toy MLP."""

import argparse
import time

import torch

from bayeslora.elbo import TrainConfig, train
from bayeslora.models import MethodSpec, adapt
from bayeslora.toybench import SyntheticTask, base_model_for, make_task


def steps_per_second(base, bundle, method, epochs):
    model = adapt(base, method)
    res = train(model, bundle.train.xy(), bundle.val.xy(), TrainConfig(epochs=epochs, eval_every=epochs))
    steps = epochs * -(-len(bundle.train) // 16)
    return res.train_time / steps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()
    torch.set_num_threads(1)
    bundle = make_task(SyntheticTask())
    base, _ = base_model_for(bundle)
    t_map = steps_per_second(base, bundle, MethodSpec("map_lora"), args.epochs)
    for depth in (0, 1):
        t = steps_per_second(base, bundle, MethodSpec("bayes_lora", flow_depth=depth), args.epochs)
        print(f"L={depth}: {1e3 * t:.3f} ms/step vs MAP {1e3 * t_map:.3f} ms/step -> {t / t_map:.2f}x")


if __name__ == "__main__":
    main()
