"""Flow-depth and inducing-dimension ablations: median OOD metrics over seeds."""

import argparse

import torch

from bayeslora.elbo import TrainConfig
from bayeslora.models import MethodSpec
from bayeslora.toybench import SyntheticTask, median_by, run_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--depths", default="0,1,2,4")
    ap.add_argument("--dims", default="4,9,16")
    args = ap.parse_args()
    torch.set_num_threads(1)
    depths = [int(v) for v in args.depths.split(",")]
    dims = [int(v) for v in args.dims.split(",")]
    base = MethodSpec("bayes_lora")
    methods = [base.with_(flow_depth=L) for L in depths]
    methods += [base.with_(inducing_rows=r, inducing_cols=r) for r in dims if r != base.inducing_rows]
    records, _ = run_grid(SyntheticTask(), methods, range(args.seeds), TrainConfig())

    def show(title, specs):
        print(title)
        for m in specs:
            print(f"  {m.label:26s}", "  ".join(f"{k}={median_by(records, m.label, 'ood', k):.4f}"
                                                for k in ("acc", "ece", "nll")))

    show("flow depth (r=9)", [base.with_(flow_depth=L) for L in depths])
    show("inducing dim (L=1)", [base.with_(inducing_rows=r, inducing_cols=r) for r in dims])


if __name__ == "__main__":
    main()
