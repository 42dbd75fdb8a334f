"""Synthetic tasks with controlled shift and the method/seed experiment grid."""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .elbo import TrainConfig, TrainResult, evaluate, train
from .models import MethodSpec, ToyModel, adapt, count_trainable, pretrain_base
from .numeric import DTYPE, ParameterError
from .streams import derive_seed, numpy_stream, torch_stream

logger = logging.getLogger(__name__)


@dataclass
class SyntheticTask:
    generator: str = "gaussian_mixture"  # gaussian_mixture | separable | markov_tokens
    n_classes: int = 4
    input_dim: int = 16
    n_pretrain: int = 2000
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    n_ood: int = 1000
    shift_angle: float = 30.0
    shift_mean: float = 1.0
    class_sep: float = 1.5
    noise_sd: float = 1.0
    task_shift: float = 0.75
    signal_dim: int = 4  # class structure lives in a random subspace of this dim; 0 gives isotropic noise
    null_noise_sd: float = 0.1
    vocab: int = 8
    seq_len: int = 12
    seed: int = 0

    def validate(self) -> None:
        if self.generator not in ("gaussian_mixture", "separable", "markov_tokens"):
            raise ParameterError(f"unknown generator {self.generator!r}")
        for name in ("n_pretrain", "n_train", "n_val", "n_test", "n_ood", "n_classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.generator != "markov_tokens" and self.input_dim < 2 and self.shift_angle:
            raise ParameterError("rotation shift needs input_dim >= 2")
        if not 0 <= self.signal_dim <= self.input_dim:
            raise ParameterError("signal_dim must lie in [0, input_dim]")


@dataclass
class Split:
    x: torch.Tensor
    y: torch.Tensor

    def __len__(self) -> int:
        return self.x.shape[0]

    def xy(self):
        return self.x, self.y


@dataclass
class TaskBundle:
    task: SyntheticTask
    pretrain: Split
    train: Split
    val: Split
    test: Split
    ood: Split
    params: dict = field(default_factory=dict)


def _rotation(dim: int, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    th = math.radians(angle_deg)
    rot = np.eye(dim)
    rot += (math.cos(th) - 1) * (np.outer(u, u) + np.outer(v, v))
    rot += math.sin(th) * (np.outer(v, u) - np.outer(u, v))
    return rot


def _mixture(means: np.ndarray, noise_cov_root: np.ndarray, n: int, rng: np.random.Generator):
    y = rng.integers(0, means.shape[0], size=n)
    x = means[y] + rng.normal(size=(n, means.shape[1])) @ noise_cov_root.T
    return x, y


def make_task(spec: SyntheticTask) -> TaskBundle:
    """Deterministic per seed; every split is an independent draw, the OOD split from the shifted generator."""
    spec.validate()
    if spec.generator == "markov_tokens":
        return _make_token_task(spec)
    rng = numpy_stream(spec.seed, "toybench", "task", "params")
    k, dim = spec.n_classes, spec.input_dim
    sep = spec.class_sep * (3.0 if spec.generator == "separable" else 1.0)
    noise = spec.noise_sd * (0.3 if spec.generator == "separable" else 1.0)
    base_means = rng.normal(size=(k, dim)) * sep
    # the fine-tuning task moves every class mean away from the pretraining one
    task_means = base_means + rng.normal(size=(k, dim)) * spec.task_shift * sep
    rot = _rotation(dim, spec.shift_angle, rng)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    if spec.signal_dim:
        # means and full-size noise confined to a random subspace, small noise off it
        basis, _ = np.linalg.qr(numpy_stream(spec.seed, "toybench", "task", "subspace").normal(size=(dim, dim)))
        sig = basis[:, : spec.signal_dim]
        proj = sig @ sig.T
        base_means, task_means = base_means @ proj, task_means @ proj
        root = noise * proj + spec.null_noise_sd * (np.eye(dim) - proj)
    else:
        root = noise * np.eye(dim)

    def draw(means, n, name):
        return _mixture(means, root, n, numpy_stream(spec.seed, "toybench", "task", name))

    def split(xy):
        x, y = xy
        return Split(torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=torch.long))

    x_ood, y_ood = draw(task_means, spec.n_ood, "ood")
    x_ood = x_ood @ rot.T + spec.shift_mean * direction
    return TaskBundle(
        task=spec,
        pretrain=split(draw(base_means, spec.n_pretrain, "pretrain")),
        train=split(draw(task_means, spec.n_train, "train")),
        val=split(draw(task_means, spec.n_val, "val")),
        test=split(draw(task_means, spec.n_test, "test")),
        ood=split((x_ood, y_ood)),
        params=dict(base_means=base_means, task_means=task_means, rotation=rot, direction=direction),
    )


def _make_token_task(spec: SyntheticTask) -> TaskBundle:
    """Next-token prediction on Markov chains; the OOD chain mixes in a different transition matrix."""
    rng = numpy_stream(spec.seed, "toybench", "task", "params")
    v = spec.vocab
    base = rng.dirichlet(np.full(v, 0.3), size=v)
    other = rng.dirichlet(np.full(v, 0.3), size=v)
    task = (1 - spec.task_shift / 2) * base + spec.task_shift / 2 * other
    shifted = rng.dirichlet(np.full(v, 0.3), size=v)
    mix = min(1.0, spec.shift_mean / 2)
    ood = (1 - mix) * task + mix * shifted

    def chains(trans, n, name):
        r = numpy_stream(spec.seed, "toybench", "task", name)
        seq = np.zeros((n, spec.seq_len + 1), dtype=np.int64)
        seq[:, 0] = r.integers(0, v, size=n)
        cum = trans.cumsum(axis=1)
        for t in range(spec.seq_len):
            u = r.random(n)
            nxt = (u[:, None] > cum[seq[:, t]]).sum(axis=1)
            seq[:, t + 1] = np.minimum(nxt, v - 1)
        return Split(torch.as_tensor(seq[:, :-1]), torch.as_tensor(seq[:, 1:]))

    return TaskBundle(task=spec, pretrain=chains(base, spec.n_pretrain, "pretrain"),
                      train=chains(task, spec.n_train, "train"), val=chains(task, spec.n_val, "val"),
                      test=chains(task, spec.n_test, "test"), ood=chains(ood, spec.n_ood, "ood"),
                      params=dict(base=base, task=task, ood=ood))


def base_model_for(bundle: TaskBundle, hidden: int = 32, seed: Optional[int] = None,
                   pretrain_epochs: int = 30) -> Tuple[ToyModel, float]:
    """Build and pretrain the frozen base model for a task; returns it with pretraining accuracy."""
    t = bundle.task
    seed = t.seed if seed is None else seed
    g = torch_stream(seed, "toybench", "base_init")
    if t.generator == "markov_tokens":
        model = ToyModel("attention", vocab=t.vocab, seq_len=t.seq_len, seed_generator=g)
    else:
        model = ToyModel("mlp", input_dim=t.input_dim, hidden=hidden, n_classes=t.n_classes, seed_generator=g)
    acc = pretrain_base(model, bundle.pretrain.x, bundle.pretrain.y, seed=derive_seed(seed, "pretrain"),
                        epochs=pretrain_epochs)
    return model, acc


@dataclass
class RunRecord:
    method: str
    seed: int
    split: str
    acc: float
    ece: float
    nll: float
    brier: float
    n_params: int
    train_time: float
    eval_time: float
    best_epoch: int
    error: str = ""


def fit_method(base: ToyModel, bundle: TaskBundle, method: MethodSpec, cfg: TrainConfig) -> TrainResult:
    model = adapt(base, method, generator=torch_stream(cfg.seed, "toybench", "adapter_init", method.kind))
    return train(model, bundle.train.xy(), bundle.val.xy(), cfg)


def evaluate_splits(model: ToyModel, bundle: TaskBundle, n_samples: int, seed: int):
    out = {}
    for name in ("test", "ood"):
        sp = getattr(bundle, name)
        t0 = time.perf_counter()
        rep = evaluate(model, sp.x, sp.y, n_samples, derive_seed(seed, "toybench", "eval", name))
        out["id" if name == "test" else "ood"] = (rep, time.perf_counter() - t0)
    return out


def run_cell(base: ToyModel, bundle: TaskBundle, method: MethodSpec, cfg: TrainConfig) -> Tuple[List[RunRecord], TrainResult]:
    seed = bundle.task.seed
    res = fit_method(base, bundle, method, replace(cfg, seed=seed))
    n_samples = method.samples if method.bayesian else 1
    rows = []
    for split, (rep, et) in evaluate_splits(res.model, bundle, n_samples, seed).items():
        rows.append(RunRecord(method.label, seed, split, rep.acc, rep.ece, rep.nll, rep.brier,
                              count_trainable(res.model), res.train_time, et, res.best_epoch))
    return rows, res


def run_grid(task: SyntheticTask, methods: Sequence[MethodSpec], seeds: Sequence[int],
             cfg: Optional[TrainConfig] = None, workers: int = 1, keep_models: bool = False):
    """Train and evaluate every (method, seed) cell on ID and OOD splits.

    A failing cell is recorded with its error message and the grid continues.
    Returns ``(records, models)`` where ``models`` maps ``(label, seed)`` to the
    trained model when ``keep_models`` is set.
    """
    cfg = cfg or TrainConfig()
    models: Dict[Tuple[str, int], ToyModel] = {}

    def per_seed(seed):
        bundle = make_task(replace(task, seed=seed))
        base, _ = base_model_for(bundle)
        out = []
        for m in methods:
            try:
                rows, res = run_cell(base, bundle, m, cfg)
                if keep_models:
                    models[(m.label, seed)] = res.model
                out.extend(rows)
            except Exception as err:  # grid keeps going
                logger.exception("cell %s seed %d failed", m.label, seed)
                for split in ("id", "ood"):
                    out.append(RunRecord(m.label, seed, split, *([math.nan] * 4), 0, 0.0, 0.0, 0, repr(err)))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            chunks = list(ex.map(per_seed, seeds))
    else:
        chunks = [per_seed(s) for s in seeds]
    records = [r for c in chunks for r in c]
    return records, models


def aggregate(records: Sequence[RunRecord]) -> List[dict]:
    """Mean and std over seeds per (method, split)."""
    groups: Dict[Tuple[str, str], List[RunRecord]] = {}
    for r in records:
        if not r.error:
            groups.setdefault((r.method, r.split), []).append(r)
    out = []
    for (method, split), rs in groups.items():
        row = {"method": method, "split": split, "n_seeds": len(rs)}
        for key in ("acc", "ece", "nll", "brier"):
            vals = [getattr(r, key) for r in rs]
            row[f"{key}_mean"] = statistics.fmean(vals)
            row[f"{key}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        row["n_params"] = rs[0].n_params
        out.append(row)
    return out


def median_by(records: Sequence[RunRecord], method: str, split: str, key: str) -> float:
    vals = [getattr(r, key) for r in records if r.method == method and r.split == split and not r.error]
    return statistics.median(vals)


METRIC_FIELDS = ["method", "seed", "split", "acc", "ece", "nll", "brier", "n_params", "best_epoch", "error"]
TIMING_FIELDS = ["method", "seed", "split", "train_time", "eval_time"]


def records_csv(records: Sequence[RunRecord], fields: Sequence[str] = METRIC_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in records:
        d = asdict(r)
        w.writerow([repr(d[f]) if isinstance(d[f], float) else d[f] for f in fields])
    return buf.getvalue()
