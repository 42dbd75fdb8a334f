"""Accuracy, 15-bin ECE, NLL, Brier, option scoring and the MC-sample sweep."""

from __future__ import annotations

import csv
import gc
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numeric import ParameterError

N_BINS = 15
PROB_FLOOR = 1e-12


@dataclass
class PredictionBatch:
    """Per-item probability vectors (ragged rows are zero-padded) and gold labels."""

    probs: np.ndarray
    labels: np.ndarray
    predicted: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.probs, (list, tuple)):
            width = max(len(p) for p in self.probs) if len(self.probs) else 0
            padded = np.zeros((len(self.probs), width))
            for i, p in enumerate(self.probs):
                padded[i, : len(p)] = p
            self.probs = padded
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ParameterError("probs must be (N, K) with one label per row")
        if self.probs.shape[0] and np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise ParameterError("probability rows must sum to 1")
        if self.predicted is None:
            self.predicted = self.probs.argmax(axis=1)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    def gold_probs(self) -> np.ndarray:
        return self.probs[np.arange(len(self)), self.labels]


@dataclass
class BinStat:
    count: int
    mean_conf: float
    mean_acc: float


@dataclass
class CalibrationReport:
    acc: float
    ece: float
    nll: float
    brier: float
    n_items: int
    bins: List[BinStat] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"acc": self.acc, "ece": self.ece, "nll": self.nll, "brier": self.brier, "n_items": self.n_items}

    def bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count", "mean_conf", "mean_acc"])
        for b, st in enumerate(self.bins):
            w.writerow([b, repr(b / N_BINS), repr((b + 1) / N_BINS), st.count, repr(st.mean_conf), repr(st.mean_acc)])
        return buf.getvalue()


def score_options(option_token_logprobs: Sequence[Sequence[float]]):
    """Length-normalized option scores, their softmax and the chosen option.

    Ties in the mean score go to the larger summed log-likelihood, then to
    the lower option index.
    """
    if not option_token_logprobs:
        raise ParameterError("need at least one option")
    means, sums = [], []
    for j, toks in enumerate(option_token_logprobs):
        if len(toks) == 0:
            raise ParameterError(f"option {j} has no tokens")
        means.append(math.fsum(toks) / len(toks))
        sums.append(math.fsum(toks))
    scores = np.array(means)
    shifted = np.exp(scores - scores.max())
    probs = shifted / shifted.sum()
    predicted = min(range(len(means)), key=lambda j: (-means[j], -sums[j], j))
    return scores, probs, predicted


def bin_index(conf: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Bin ``b`` covers ``(b/n, (b+1)/n]``; a confidence of exactly 0 joins bin 0."""
    idx = np.ceil(conf * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def reliability_bins(batch: PredictionBatch, n_bins: int = N_BINS) -> List[BinStat]:
    conf, correct = batch.confidence, batch.correct.astype(np.float64)
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    out = []
    for b in range(n_bins):
        n = int(counts[b])
        out.append(BinStat(n, conf_sum[b] / n if n else 0.0, acc_sum[b] / n if n else 0.0))
    return out


def ece_from_bins(bins: List[BinStat]) -> float:
    n = sum(b.count for b in bins)
    return float(sum(b.count / n * abs(b.mean_acc - b.mean_conf) for b in bins if b.count))


def ece_15bin(batch: PredictionBatch) -> float:
    if len(batch) == 0:
        raise ParameterError("ECE of an empty batch")
    return ece_from_bins(reliability_bins(batch, N_BINS))


def nll(batch: PredictionBatch) -> float:
    gold = np.maximum(batch.gold_probs(), PROB_FLOOR)
    return float(-np.mean(np.log(gold)))


def brier(batch: PredictionBatch) -> float:
    if len(batch) == 0:
        raise ParameterError("Brier score of an empty batch")
    onehot = np.zeros_like(batch.probs)
    onehot[np.arange(len(batch)), batch.labels] = 1.0
    return float(np.mean(((batch.probs - onehot) ** 2).sum(axis=1)))


def accuracy(batch: PredictionBatch) -> float:
    return float(np.mean(batch.correct))


def calibration_report(batch: PredictionBatch) -> CalibrationReport:
    bins = reliability_bins(batch)
    return CalibrationReport(acc=accuracy(batch), ece=ece_from_bins(bins), nll=nll(batch), brier=brier(batch),
                             n_items=len(batch), bins=bins)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def top_entropy_subset(reference_probs, fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * N)`` highest-entropy items, ties to the lower index."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must lie in (0, 1]")
    h = entropy(reference_probs)
    k = math.ceil(fraction * len(h) - 1e-9)
    order = np.argsort(-h, kind="stable")
    return np.sort(order[:k])


@dataclass
class SweepRow:
    s: int
    acc: float
    nll: float
    ece: float
    wall_time: float


def mc_sweep(model, x, y, s_values: Sequence[int], seed: int, repeats: int = 3,
             batch_size: int = 512) -> List[SweepRow]:
    """Evaluate a fixed checkpoint with S predictive samples for each S.

    Samples are run one forward pass at a time, so cost scales with S; the
    reported wall time is the minimum over ``repeats`` timed evaluations.
    """
    from .models import predict_proba_sequential

    rows = []
    for s in s_values:
        best = math.inf
        probs = None
        for _ in range(max(1, repeats)):
            gc_was_on = gc.isenabled()
            gc.disable()  # as timeit does: keep collector pauses out of ms-scale timings
            try:
                t0 = time.perf_counter()
                probs = predict_proba_sequential(model, x, s, seed=seed, batch_size=batch_size)
                best = min(best, time.perf_counter() - t0)
            finally:
                if gc_was_on:
                    gc.enable()
        batch = PredictionBatch(probs, np.asarray(y).reshape(-1))
        rows.append(SweepRow(s=s, acc=accuracy(batch), nll=nll(batch), ece=ece_15bin(batch), wall_time=best))
    return rows


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0


def sweep_rows_as_dicts(rows: List[SweepRow]) -> List[dict]:
    return [asdict(r) for r in rows]
