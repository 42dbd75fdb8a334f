"""Command-line entry point: ``bayeslora --config run.ini [--mode M] [--seed N] [--out DIR]``.

Every mode writes ``manifest.json`` last, listing the resolved configuration,
library versions and every artifact written. Files whose content depends only
on the configuration and seed (metrics, history, bins, Pareto front) never
contain wall-clock values; those go to ``timings.csv``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 1 other
errors. Failures print a one-line JSON record to stderr and, when the output
directory is known, write it to ``error.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import statistics
import sys
import time
import traceback
from dataclasses import asdict, replace
from importlib import metadata
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import MODES, ConfigError, RunConfig, dump_config, load_config, parse_config
from .elbo import TrainConfig, evaluate
from .hpo import ParetoArchive, run_bo
from .metrics import linear_fit_r2, mc_sweep
from .models import MethodSpec, ToyModel, adapt, count_trainable
from .numeric import DecompositionError, NumericError
from .toybench import (
    METRIC_FIELDS,
    TIMING_FIELDS,
    RunRecord,
    SyntheticTask,
    TaskBundle,
    base_model_for,
    evaluate_splits,
    fit_method,
    make_task,
    median_by,
    records_csv,
    run_grid,
)

logger = logging.getLogger("bayeslora")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class Outputs:
    """Collects artifacts written atomically into one directory."""

    def __init__(self, root: str):
        self.root = root
        self.files: List[str] = []

    def path(self, name: str) -> str:
        import os

        return os.path.join(self.root, name)

    def text(self, name: str, content: str) -> None:
        atomic_write(self.path(name), content.encode("utf-8"))
        if name not in self.files:
            self.files.append(name)

    def checkpoint(self, name: str, model: ToyModel, meta: dict) -> None:
        save_checkpoint(self.path(name), model, meta)
        if name not in self.files:
            self.files.append(name)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def rows_csv(fields: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f, "")) for f in fields])
    return buf.getvalue()


def versions() -> Dict[str, str]:
    out = {"bayeslora": __version__, "python": platform.python_version()}
    for pkg in ("torch", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "missing"
    return out


def _prepare(task: SyntheticTask, seed: int):
    bundle = make_task(replace(task, seed=seed))
    base, pre_acc = base_model_for(bundle)
    return bundle, base, pre_acc


def _checkpoint_meta(cfg: RunConfig, model: ToyModel, seed: int) -> dict:
    return {"seed": seed, "model_config": model.config, "method": model.method.as_dict(),
            "task": asdict(replace(cfg.task, seed=seed)), "train": asdict(cfg.train)}


def rebuild_model(tensors: Dict[str, torch.Tensor], meta: dict) -> ToyModel:
    base = ToyModel(**meta["model_config"])
    base.freeze_base()
    model = adapt(base, MethodSpec(**meta["method"]))
    model.load_state_dict(tensors)
    model.invalidate_caches()
    return model


def _bins_rows(seed: int, method: str, split: str, report) -> List[dict]:
    n = len(report.bins)
    return [{"method": method, "seed": seed, "split": split, "bin": i, "lower": i / n, "upper": (i + 1) / n,
             "count": b.count, "mean_conf": b.mean_conf, "mean_acc": b.mean_acc}
            for i, b in enumerate(report.bins)]


BIN_FIELDS = ["method", "seed", "split", "bin", "lower", "upper", "count", "mean_conf", "mean_acc"]


def _eval_rows(model, bundle: TaskBundle, method: MethodSpec, seed: int, train_time: float, best_epoch: int):
    n_samples = method.samples if method.bayesian else 1
    records, bins = [], []
    for split, (rep, et) in evaluate_splits(model, bundle, n_samples, seed).items():
        records.append(RunRecord(method.label, seed, split, rep.acc, rep.ece, rep.nll, rep.brier,
                                 count_trainable(model), train_time, et, best_epoch))
        bins += _bins_rows(seed, method.label, split, rep)
    return records, bins


# -- modes --------------------------------------------------------------------------


def mode_train(cfg: RunConfig, out: Outputs) -> dict:
    records, bins, history = [], [], []
    for k, seed in enumerate(cfg.run.seeds):
        bundle, base, _ = _prepare(cfg.task, seed)
        res = fit_method(base, bundle, cfg.method, replace(cfg.train, seed=seed))
        recs, b = _eval_rows(res.model, bundle, cfg.method, seed, res.train_time, res.best_epoch)
        records += recs
        bins += b
        history += [dict(seed=seed, method=cfg.method.label, **h) for h in res.history]
        name = "checkpoint.bin" if k == 0 else f"checkpoint_seed{seed}.bin"
        out.checkpoint(name, res.model, _checkpoint_meta(cfg, res.model, seed))
    out.text("metrics.csv", records_csv(records))
    out.text("timings.csv", records_csv(records, TIMING_FIELDS))
    out.text("bins.csv", rows_csv(BIN_FIELDS, bins))
    out.text("history.jsonl", "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    return {"n_records": len(records)}


def mode_eval(cfg: RunConfig, out: Outputs) -> dict:
    path = cfg.run.checkpoint or out.path("checkpoint.bin")
    tensors, meta = load_checkpoint(path)
    model = rebuild_model(tensors, meta)
    seed = int(meta["seed"])
    bundle = make_task(SyntheticTask(**meta["task"]))
    records, bins = _eval_rows(model, bundle, model.method, seed, 0.0, 0)
    out.text("eval_metrics.csv", records_csv(records))
    out.text("eval_bins.csv", rows_csv(BIN_FIELDS, bins))
    return {"checkpoint": path}


def _grid(cfg: RunConfig, methods: List[MethodSpec], out: Outputs) -> List[RunRecord]:
    records, _ = run_grid(cfg.task, methods, cfg.run.seeds, cfg.train, workers=cfg.run.workers)
    out.text("grid.csv", records_csv(records))
    out.text("timings.csv", records_csv(records, TIMING_FIELDS))
    return records


def _median_rows(records, methods: List[MethodSpec], splits=("id", "ood"), extra=None) -> List[dict]:
    rows = []
    for split in splits:
        for m in methods:
            row = {"method": m.label, "split": split}
            if extra:
                row.update(extra(m))
            for key in ("acc", "ece", "nll", "brier"):
                try:
                    row[key] = median_by(records, m.label, split, key)
                except statistics.StatisticsError:
                    row[key] = float("nan")
            row["n_params"] = next((r.n_params for r in records if r.method == m.label and not r.error), 0)
            rows.append(row)
    return rows


def mode_map_recovery(cfg: RunConfig, out: Outputs) -> dict:
    full = cfg.method if cfg.method.kind == "bayes_lora" else replace(cfg.method, kind="bayes_lora")
    methods = [MethodSpec("map_lora", rank=full.rank, alpha=full.alpha),
               MethodSpec("degenerate", rank=full.rank, alpha=full.alpha,
                          inducing_rows=full.inducing_rows, inducing_cols=full.inducing_cols), full]
    records = _grid(cfg, methods, out)
    rows = _median_rows(records, methods, splits=("id",))
    out.text("metrics.csv", rows_csv(["method", "acc", "ece", "nll"], rows))
    return {"table": rows}


def mode_ablate_flow(cfg: RunConfig, out: Outputs) -> dict:
    methods = [replace(cfg.method, kind="bayes_lora", flow_depth=L) for L in cfg.run.flow_depths]
    records = _grid(cfg, methods, out)
    rows = _median_rows(records, methods, extra=lambda m: {"flow_depth": m.flow_depth})
    out.text("metrics.csv", rows_csv(["method", "split", "flow_depth", "acc", "ece", "nll", "brier", "n_params"],
                                     rows))
    return {}


def mode_ablate_rank(cfg: RunConfig, out: Outputs) -> dict:
    methods = [replace(cfg.method, kind="bayes_lora", inducing_rows=r, inducing_cols=r)
               for r in cfg.run.inducing_dims]
    records = _grid(cfg, methods, out)
    rows = _median_rows(records, methods, extra=lambda m: {"inducing_dim": m.inducing_rows})
    out.text("metrics.csv", rows_csv(["method", "split", "inducing_dim", "acc", "ece", "nll", "brier",
                                      "n_params"], rows))
    return {}


def mode_sweep_samples(cfg: RunConfig, out: Outputs) -> dict:
    rows, times, fits = [], [], []
    s_values = list(cfg.run.sweep_samples)
    for seed in cfg.run.seeds:
        bundle, base, _ = _prepare(cfg.task, seed)
        res = fit_method(base, bundle, cfg.method, replace(cfg.train, seed=seed))
        sweep = mc_sweep(res.model, bundle.ood.x, bundle.ood.y, s_values, seed=seed, repeats=cfg.run.sweep_repeats)
        for r in sweep:
            rows.append({"seed": seed, "s": r.s, "acc": r.acc, "nll": r.nll, "ece": r.ece})
            times.append({"seed": seed, "s": r.s, "wall_time": r.wall_time})
        fits.append({"seed": seed, "r2": linear_fit_r2([r.s for r in sweep], [r.wall_time for r in sweep]) if
                     len(sweep) > 1 else 1.0})
    out.text("metrics.csv", rows_csv(["seed", "s", "acc", "nll", "ece"], rows))
    out.text("timings.csv", rows_csv(["seed", "s", "wall_time"], times))
    out.text("sweep_fit.csv", rows_csv(["seed", "r2"], fits))
    return {}


def mode_hpo(cfg: RunConfig, out: Outputs) -> dict:
    h = cfg.hpo
    seed = cfg.run.seeds[0]
    bundle, base, _ = _prepare(cfg.task, seed)
    train_cfg = replace(cfg.train, seed=seed, epochs=h.epochs or cfg.train.epochs)
    val = bundle.val
    n_samples = cfg.method.samples if cfg.method.bayesian else 1

    baseline = fit_method(base, bundle, MethodSpec("map_lora", rank=cfg.method.rank, alpha=cfg.method.alpha),
                          train_cfg)
    floor = evaluate(baseline.model, val.x, val.y, 1, seed).acc - h.acc_tolerance

    def objective(x):
        res = fit_method(base, bundle, cfg.method, replace(train_cfg, learning_rate=x["lr"], weight_decay=x["wd"]))
        rep = evaluate(res.model, val.x, val.y, n_samples, seed)
        return (rep.ece, rep.nll, -rep.acc), (floor - rep.acc,)

    bounds = {"lr": (h.lr_min, h.lr_max), "wd": (h.wd_min, h.wd_max)}
    archive = run_bo(objective, bounds, h.rounds, h.n_init, seed, h.candidates, h.t_samples, h.ref_margin)
    out.text("archive.csv", archive.to_csv())
    out.text("pareto.csv", archive.pareto_csv())
    selected = {}
    if archive.pareto_indices():
        i = archive.select_operating_point()
        o = archive.items[i]
        selected = {"index": i, "lr": o.x["lr"], "wd": o.x["wd"], "ece": o.objectives[0], "nll": o.objectives[1],
                    "acc": -o.objectives[2], "acc_floor": floor}
    out.text("metrics.csv", rows_csv(["index", "lr", "wd", "acc", "nll", "ece", "acc_floor"],
                                     [selected] if selected else []))
    return {"selected": {k: float(v) for k, v in selected.items()}}


DISPATCH: Dict[str, Callable[[RunConfig, Outputs], dict]] = {
    "train": mode_train,
    "eval": mode_eval,
    "sweep-samples": mode_sweep_samples,
    "hpo": mode_hpo,
    "map-recovery": mode_map_recovery,
    "ablate-flow": mode_ablate_flow,
    "ablate-rank": mode_ablate_rank,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayeslora", description="Bayesian low-rank adapter experiments at toy scale.")
    p.add_argument("--config", help="INI config file; omitted keys take the shipped defaults")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int, help="run a single seed, overriding [run] seeds")
    p.add_argument("--out", help="output directory, overriding [run] out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(kind: str, err: BaseException, violations=None) -> dict:
    rec = {"status": "error", "kind": kind, "type": type(err).__name__, "message": str(err)}
    if violations is not None:
        rec["violations"] = violations
    return rec


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides: Dict[str, Dict[str, str]] = {"run": {}}
    if args.mode:
        overrides["run"]["mode"] = args.mode
    if args.seed is not None:
        overrides["run"]["seeds"] = str(args.seed)
    if args.out:
        overrides["run"]["out"] = args.out
    out: Optional[Outputs] = Outputs(args.out) if args.out else None
    try:
        cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides)
    except ConfigError as err:
        return _fail(out, EXIT_CONFIG, _error_record("config", err, err.violations))
    except OSError as err:
        return _fail(out, EXIT_CONFIG, _error_record("config", err, [f"cannot read config: {err}"]))
    out = Outputs(cfg.run.out)
    torch.set_num_threads(1)
    started = time.time()
    try:
        out.text("config.ini", dump_config(cfg))
        summary = DISPATCH[cfg.run.mode](cfg, out)
    except (NumericError, DecompositionError) as err:
        return _fail(out, EXIT_NUMERIC, _error_record("numeric", err))
    except (CheckpointError, OSError, ValueError, RuntimeError) as err:
        logger.debug("%s", traceback.format_exc())
        return _fail(out, EXIT_ERROR, _error_record("runtime", err))
    manifest = {"mode": cfg.run.mode, "seeds": list(cfg.run.seeds), "config": cfg.as_dict(),
                "versions": versions(), "artifacts": list(out.files) + ["manifest.json"],
                "summary": summary, "started_at": started, "elapsed_s": time.time() - started}
    out.text("manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return EXIT_OK


def _fail(out: Optional[Outputs], code: int, record: dict) -> int:
    record["exit_code"] = code
    line = json.dumps(record, sort_keys=True)
    print(line, file=sys.stderr)
    if out is not None:
        try:
            out.text("error.json", line + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
