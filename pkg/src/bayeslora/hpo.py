"""Constrained multi-objective Bayesian optimisation over (learning rate, weight decay).

Objectives are minimised by the caller (ECE, NLL, -ACC) and negated internally,
so hypervolume and reference points live in maximisation orientation. Each
objective and each constraint gets an independent GP with a squared-exponential
ARD kernel; candidates are scored by the Monte Carlo noisy expected hypervolume
improvement weighted by the probability that every constraint is satisfied.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.special import ndtr
from scipy.stats import qmc

from .numeric import DecompositionError, ParameterError

GP_JITTER = 1e-8
DEFAULT_BOUNDS = {"lr": (1e-5, 2e-3), "wd": (1e-2, 5e-1)}
OBJECTIVES = ("ece", "nll", "neg_acc")


class InfeasibleArchiveError(RuntimeError):
    """Raised when an operation needs at least one feasible observation."""


# -- Gaussian process surrogate -------------------------------------------------


def se_kernel(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray, signal_var: float) -> np.ndarray:
    diff = (x1[:, None, :] - x2[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def _chol_once(k: np.ndarray) -> np.ndarray:
    """Cholesky with a single jittered retry."""
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        jitter = GP_JITTER * max(1.0, float(np.mean(np.diag(k))))
        try:
            return np.linalg.cholesky(k + jitter * np.eye(k.shape[0]))
        except np.linalg.LinAlgError as err:
            raise DecompositionError("GP kernel matrix is not positive definite after jitter") from err


@dataclass
class GpSurrogate:
    """Exact GP with zero prior mean on ``(y - y_mean) / y_scale``.

    The Cholesky factor of ``K + noise_var I`` is computed on construction and
    reused for every posterior query.
    """

    x: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 0.0
    y_mean: float = 0.0
    y_scale: float = 1.0
    chol: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.lengthscales = np.broadcast_to(np.asarray(self.lengthscales, dtype=float), (self.x.shape[1],)).copy()
        if self.x.shape[0] < 1 or self.x.shape[0] != self.y.shape[0]:
            raise ParameterError("GP needs >= 1 training point with matching targets")
        if self.signal_var <= 0 or self.noise_var < 0 or np.any(self.lengthscales <= 0):
            raise ParameterError("GP hyperparameters must be positive")
        k = se_kernel(self.x, self.x, self.lengthscales, self.signal_var) + self.noise_var * np.eye(len(self.y))
        self.chol = _chol_once(k)
        z = (self.y - self.y_mean) / self.y_scale
        self.alpha = _cho_solve(self.chol, z)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def _cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import cho_solve

    return cho_solve((chol, True), b)


def gp_posterior(gp: GpSurrogate, queries, observation_noise: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the latent function at ``queries``.

    With ``observation_noise`` the noise variance is added to the diagonal,
    giving the predictive distribution of a new noisy observation.
    """
    xq = np.atleast_2d(np.asarray(queries, dtype=float))
    if xq.shape[1] != gp.dim:
        raise ParameterError(f"queries have dim {xq.shape[1]}, GP has {gp.dim}")
    ks = se_kernel(gp.x, xq, gp.lengthscales, gp.signal_var)
    mean = gp.y_mean + gp.y_scale * (ks.T @ gp.alpha)
    from scipy.linalg import solve_triangular

    v = solve_triangular(gp.chol, ks, lower=True)
    cov = se_kernel(xq, xq, gp.lengthscales, gp.signal_var) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], 0.0)
    if observation_noise:
        cov[idx] += gp.noise_var
    return mean, cov * gp.y_scale**2


def _neg_mll(theta: np.ndarray, x: np.ndarray, z: np.ndarray, fixed_noise: Optional[float]):
    """Negative log marginal likelihood and its gradient in log-parameters."""
    d = x.shape[1]
    ell = np.exp(theta[:d])
    s2 = math.exp(theta[d])
    noise = fixed_noise if fixed_noise is not None else math.exp(theta[d + 1])
    n = len(z)
    diff2 = ((x[:, None, :] - x[None, :, :]) / ell) ** 2
    kf = s2 * np.exp(-0.5 * diff2.sum(-1))
    k = kf + (noise + GP_JITTER) * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return 1e10, np.zeros_like(theta)
    alpha = _cho_solve(chol, z)
    val = 0.5 * z @ alpha + np.log(np.diag(chol)).sum() + 0.5 * n * math.log(2 * math.pi)
    inner = np.outer(alpha, alpha) - _cho_solve(chol, np.eye(n))
    g = np.empty_like(theta)
    for j in range(d):
        g[j] = -0.5 * np.sum(inner * kf * diff2[:, :, j])
    g[d] = -0.5 * np.sum(inner * kf)
    if fixed_noise is None:
        g[d + 1] = -0.5 * noise * np.trace(inner)
    return val, g


def fit_gp(x, y, noise_var: Optional[float] = None, n_starts: int = 8, rng: Optional[np.random.Generator] = None,
           lengthscale_bounds: Tuple[float, float] = (1e-2, 1e2),
           noise_bounds: Tuple[float, float] = (1e-8, 1.0)) -> GpSurrogate:
    """Fit kernel hyperparameters by multi-start L-BFGS on the marginal likelihood.

    Targets are standardised first. ``noise_var`` fixes the (standardised)
    noise variance instead of learning it; pass 0 for an interpolating GP.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    rng = rng if rng is not None else np.random.default_rng(0)
    y_mean = float(y.mean())
    y_scale = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
    z = (y - y_mean) / y_scale
    d = x.shape[1]
    lo = [math.log(lengthscale_bounds[0])] * d + [math.log(1e-2)]
    hi = [math.log(lengthscale_bounds[1])] * d + [math.log(1e2)]
    if noise_var is None:
        lo.append(math.log(noise_bounds[0]))
        hi.append(math.log(noise_bounds[1]))
    lo, hi = np.array(lo), np.array(hi)
    best = None
    if len(y) >= 2:
        for i in range(n_starts):
            if i == 0:
                start = np.concatenate([np.zeros(d), [0.0], [math.log(1e-3)] if noise_var is None else []])
                start = np.clip(start, lo, hi)
            else:
                start = rng.uniform(lo, hi)
            res = optimize.minimize(_neg_mll, start, args=(x, z, noise_var), jac=True, method="L-BFGS-B",
                                    bounds=list(zip(lo, hi)))
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
    theta = best.x if best is not None else np.zeros(len(lo))
    noise = noise_var if noise_var is not None else float(np.exp(theta[d + 1]))
    return GpSurrogate(x, y, np.exp(theta[:d]), float(np.exp(theta[d])), noise, y_mean, y_scale)


def sample_joint(mean: np.ndarray, cov: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` reparameterised draws ``mean + L eps``.

    Singular covariances (e.g. repeated or noise-free observed inputs) use a
    clipped eigen root, so zero-variance directions stay exactly deterministic.
    """
    m = len(mean)
    eps = rng.standard_normal((n, m))
    try:
        root = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + eps @ root.T


# -- feasibility, dominance, hypervolume ---------------------------------------


def feasibility_probability(mean, var) -> np.ndarray:
    """``Phi(-mu / sigma)`` per entry, with the limit conventions at zero variance."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    sd = np.sqrt(np.clip(var, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = ndtr(-mean / sd)
    degenerate = sd == 0
    p = np.where(degenerate, np.where(mean < 0, 1.0, np.where(mean > 0, 0.0, 0.5)), p)
    return p


def prob_feasible(constraint_surrogates: Sequence[GpSurrogate], queries) -> float:
    """Product over batch points and constraints of ``P(c(x) <= 0)``."""
    total = 1.0
    for gp in constraint_surrogates:
        mu, cov = gp_posterior(gp, queries)
        total *= float(np.prod(feasibility_probability(mu, np.diag(cov))))
    return total


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """``a`` dominates ``b`` under minimisation."""
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_filter(points) -> List[int]:
    """Indices of points not dominated by any other point (minimisation)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.size == 0:
        return []
    le = np.all(p[:, None, :] <= p[None, :, :], axis=-1)
    lt = np.any(p[:, None, :] < p[None, :, :], axis=-1)
    dominated = np.any(le & lt, axis=0)
    return [int(i) for i in np.flatnonzero(~dominated)]


def _hv_sorted(p: np.ndarray, ref: np.ndarray) -> float:
    """Recursive slicing on the last coordinate; ``p`` strictly above ``ref``."""
    n, d = p.shape
    if n == 0:
        return 0.0
    if d == 1:
        return float(p[:, 0].max() - ref[0])
    if d == 2:
        order = np.argsort(-p[:, 0], kind="stable")
        xs, ys = p[order, 0], np.maximum.accumulate(p[order, 1])
        widths = xs - np.append(xs[1:], ref[0])
        return float(np.sum(widths * (ys - ref[1])))
    order = np.argsort(-p[:, -1], kind="stable")
    p = p[order]
    total = 0.0
    for i in range(n):
        lower = p[i + 1, -1] if i + 1 < n else ref[-1]
        depth = p[i, -1] - lower
        if depth > 0:
            total += depth * _hv_sorted(p[: i + 1, :-1], ref[:-1])
    return total


def hypervolume_with_flags(points, reference) -> Tuple[float, np.ndarray]:
    """Hypervolume (maximisation) and a mask of points clipped for not dominating the reference."""
    ref = np.asarray(reference, dtype=float).reshape(-1)
    p = np.asarray(points, dtype=float).reshape(-1, ref.shape[0])
    ok = np.all(p > ref, axis=1)
    return _hv_sorted(p[ok], ref), ~ok


def hypervolume(points, reference) -> float:
    """Lebesgue measure of the union of boxes ``[reference, p]``, maximisation orientation."""
    return hypervolume_with_flags(points, reference)[0]


def _hv2d_batch(q: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Hypervolume of ``B`` two-dimensional point sets ``(B, n, 2)`` at once; points below ref add zero."""
    q = np.maximum(q, ref)
    order = np.argsort(-q[..., 0], axis=1, kind="stable")
    xs = np.take_along_axis(q[..., 0], order, axis=1)
    ys = np.maximum.accumulate(np.take_along_axis(q[..., 1], order, axis=1), axis=1)
    nxt = np.concatenate([xs[:, 1:], np.full((q.shape[0], 1), ref[0])], axis=1)
    return np.sum((xs - nxt) * (ys - ref[1]), axis=1)


def hv_improvement(front: np.ndarray, cands: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Hypervolume gained by adding each candidate point on its own to ``front`` (maximisation).

    Uses ``HV(P + y) - HV(P) = vol[ref, y] - HV({min(p, y)})``.
    """
    cands = np.atleast_2d(cands)
    box = np.prod(np.clip(cands - ref, 0.0, None), axis=1)
    if front.shape[0] == 0:
        return box
    clipped = np.minimum(front[None, :, :], cands[:, None, :])
    if ref.shape[0] == 2:
        inner = _hv2d_batch(clipped, ref)
    else:
        inner = np.array([hypervolume(c, ref) for c in clipped])
    return np.clip(box - inner, 0.0, None)


def reference_point(points_max, margin: float = 0.0) -> np.ndarray:
    """Componentwise minimum of feasible values (maximisation orientation) minus ``margin``."""
    p = np.atleast_2d(np.asarray(points_max, dtype=float))
    if p.size == 0:
        raise InfeasibleArchiveError("no feasible observation yet; run the space-filling phase first")
    return p.min(axis=0) - margin


# -- archive ------------------------------------------------------------------


@dataclass
class Observation:
    x: Dict[str, float]
    objectives: np.ndarray  # minimisation orientation
    constraints: np.ndarray  # feasible iff all <= 0
    round: int = 0

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.constraints <= 0))


class ParetoArchive:
    """Every evaluated configuration plus the feasible non-dominated subset."""

    def __init__(self, objective_names: Sequence[str] = OBJECTIVES, param_names: Sequence[str] = ("lr", "wd")):
        self.objective_names = tuple(objective_names)
        self.param_names = tuple(param_names)
        self.items: List[Observation] = []

    def __len__(self) -> int:
        return len(self.items)

    def add(self, x: Dict[str, float], objectives, constraints=(), round: int = 0) -> Observation:
        obj = np.asarray(objectives, dtype=float).reshape(-1)
        if obj.shape[0] != len(self.objective_names):
            raise ParameterError(f"expected {len(self.objective_names)} objectives, got {obj.shape[0]}")
        if not np.all(np.isfinite(obj)):
            raise ParameterError("objective values must be finite")
        ob = Observation(dict(x), obj, np.asarray(constraints, dtype=float).reshape(-1), round)
        self.items.append(ob)
        return ob

    def objectives(self) -> np.ndarray:
        return np.array([o.objectives for o in self.items]).reshape(-1, len(self.objective_names))

    def constraints(self) -> np.ndarray:
        return np.array([o.constraints for o in self.items])

    def feasible_mask(self) -> np.ndarray:
        return np.array([o.feasible for o in self.items], dtype=bool)

    def pareto_indices(self) -> List[int]:
        feas = np.flatnonzero(self.feasible_mask())
        if feas.size == 0:
            return []
        keep = pareto_filter(self.objectives()[feas])
        return [int(feas[i]) for i in keep]

    def reference_point(self, margin: float = 0.0) -> np.ndarray:
        return reference_point(-self.objectives()[self.feasible_mask()], margin)

    def hypervolume(self, reference_max) -> float:
        idx = self.pareto_indices()
        return hypervolume(-self.objectives()[idx], reference_max) if idx else 0.0

    def select_operating_point(self, nll_key: str = "nll") -> int:
        """Pareto member closest to the utopia point after per-objective range scaling; ties go to lower NLL."""
        idx = self.pareto_indices()
        if not idx:
            raise InfeasibleArchiveError("no feasible observation to select from")
        f = self.objectives()[idx]
        lo, hi = f.min(axis=0), f.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        dist = np.linalg.norm((f - lo) / span, axis=1)
        nll = f[:, self.objective_names.index(nll_key)] if nll_key in self.objective_names else np.zeros(len(idx))
        best = min(range(len(idx)), key=lambda i: (round(float(dist[i]), 12), float(nll[i])))
        return idx[best]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_c = max((len(o.constraints) for o in self.items), default=0)
        w.writerow(list(self.param_names) + list(self.objective_names) + [f"c{j}" for j in range(n_c)]
                   + ["feasible", "round"])
        for o in self.items:
            w.writerow([repr(float(o.x[p])) for p in self.param_names] + [repr(float(v)) for v in o.objectives]
                       + [repr(float(v)) for v in o.constraints] + [int(o.feasible), o.round])
        return buf.getvalue()

    def pareto_csv(self) -> str:
        """Front in ``candidate, acc, nll, ece, lr, wd`` columns (ACC re-negated)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate", "acc", "nll", "ece", "lr", "wd"])
        names = self.objective_names
        for k, i in enumerate(sorted(self.pareto_indices(), key=lambda i: self.items[i].objectives[names.index("nll")]
                                     if "nll" in names else 0.0)):
            o = self.items[i]
            get = dict(zip(names, o.objectives))
            w.writerow([k, repr(-float(get.get("neg_acc", math.nan))), repr(float(get.get("nll", math.nan))),
                        repr(float(get.get("ece", math.nan))), repr(float(o.x.get("lr", math.nan))),
                        repr(float(o.x.get("wd", math.nan)))])
        return buf.getvalue()


# -- acquisition ----------------------------------------------------------------


def qnehvi_acquire(surrogates: Sequence[GpSurrogate], constraint_surrogates: Sequence[GpSurrogate],
                   archive_x: np.ndarray, archive_feasible: np.ndarray, candidates, t_samples: int,
                   rng: np.random.Generator, reference_max: np.ndarray) -> np.ndarray:
    """PoF-weighted Monte Carlo expected hypervolume improvement, one value per candidate.

    Each of the ``t_samples`` draws is joint over historical inputs and all
    candidates, so the sampled front and the candidate value are coherent.
    Surrogates model minimised objectives; samples are negated internally.
    Candidates are scored individually (batch size one).
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    hist = np.atleast_2d(np.asarray(archive_x, dtype=float))
    feas = np.asarray(archive_feasible, dtype=bool)
    if t_samples < 1:
        raise ParameterError("t_samples must be >= 1")
    n_h = hist.shape[0]
    allx = np.vstack([hist, cands])
    draws = []
    for gp in surrogates:
        mu, cov = gp_posterior(gp, allx)
        draws.append(-sample_joint(mu, cov, t_samples, rng))
    draws = np.stack(draws, axis=-1)  # (T, n_h + n_c, M)
    ref = np.asarray(reference_max, dtype=float)
    total = np.zeros(cands.shape[0])
    for t in range(t_samples):
        past = draws[t, :n_h][feas]
        if past.shape[0]:
            past = past[pareto_filter(-past)]
        total += hv_improvement(past, draws[t, n_h:], ref)
    value = total / t_samples
    if constraint_surrogates:
        pof = np.ones(cands.shape[0])
        for gp in constraint_surrogates:
            mu, cov = gp_posterior(gp, cands)
            pof *= feasibility_probability(mu, np.diag(cov))
        value = value * pof
    return value


# -- proposal loop ----------------------------------------------------------------


def to_unit(x: Dict[str, float], bounds: Dict[str, Tuple[float, float]]) -> np.ndarray:
    return np.array([(math.log10(x[k]) - math.log10(lo)) / (math.log10(hi) - math.log10(lo))
                     for k, (lo, hi) in bounds.items()])


def from_unit(u: np.ndarray, bounds: Dict[str, Tuple[float, float]]) -> Dict[str, float]:
    out = {}
    for v, (k, (lo, hi)) in zip(u, bounds.items()):
        a, b = math.log10(lo), math.log10(hi)
        out[k] = float(min(hi, max(lo, 10 ** (a + float(v) * (b - a)))))
    return out


def sobol_points(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    m = max(0, math.ceil(math.log2(max(n, 1))))
    return qmc.Sobol(dim, scramble=True, seed=rng).random_base2(m)[:n]


@dataclass
class Proposal:
    x: Dict[str, float]
    unit: np.ndarray
    acquisition: float
    space_filling: bool


def fit_surrogates(archive: ParetoArchive, bounds, rng: np.random.Generator, n_starts: int = 4):
    xs = np.array([to_unit(o.x, bounds) for o in archive.items])
    objs = [fit_gp(xs, archive.objectives()[:, j], rng=rng, n_starts=n_starts)
            for j in range(len(archive.objective_names))]
    cons = archive.constraints()
    cgps = [fit_gp(xs, cons[:, j], rng=rng, n_starts=n_starts) for j in range(cons.shape[1] if cons.ndim == 2 else 0)]
    return xs, objs, cgps


def propose(archive: ParetoArchive, bounds: Dict[str, Tuple[float, float]] = DEFAULT_BOUNDS, budget: int = 512,
            rng: Optional[np.random.Generator] = None, t_samples: int = 32, ref_margin: float = 0.0,
            surrogates=None) -> Proposal:
    """Best of ``budget`` Sobol candidates under the acquisition; space-filling while nothing is feasible."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    cands = sobol_points(budget, len(bounds), rng)
    if len(archive) == 0 or not archive.feasible_mask().any():
        u = cands[0]
        return Proposal(from_unit(u, bounds), u, 0.0, True)
    xs, objs, cgps = surrogates if surrogates is not None else fit_surrogates(archive, bounds, rng)
    ref = archive.reference_point(ref_margin)
    acq = qnehvi_acquire(objs, cgps, xs, archive.feasible_mask(), cands, t_samples, rng, ref)
    i = int(np.argmax(acq))
    return Proposal(from_unit(cands[i], bounds), cands[i], float(acq[i]), False)


Evaluator = Callable[[Dict[str, float]], Tuple[Sequence[float], Sequence[float]]]


def run_bo(evaluate: Evaluator, bounds: Dict[str, Tuple[float, float]], rounds: int, n_init: int = 5,
           seed: int = 0, budget: int = 256, t_samples: int = 32, ref_margin: float = 0.0,
           objective_names: Sequence[str] = OBJECTIVES) -> ParetoArchive:
    """``n_init`` space-filling evaluations followed by ``rounds`` acquisition-driven ones."""
    rng = np.random.default_rng(seed)
    archive = ParetoArchive(objective_names, tuple(bounds))
    for u in sobol_points(n_init, len(bounds), rng):
        x = from_unit(u, bounds)
        f, c = evaluate(x)
        archive.add(x, f, c, round=0)
    for r in range(1, rounds + 1):
        p = propose(archive, bounds, budget, rng, t_samples, ref_margin)
        f, c = evaluate(p.x)
        archive.add(p.x, f, c, round=r)
    return archive


def run_random(evaluate: Evaluator, bounds: Dict[str, Tuple[float, float]], n: int, seed: int = 0,
               objective_names: Sequence[str] = OBJECTIVES) -> ParetoArchive:
    """Budget-matched baseline: ``n`` log-uniform random configurations."""
    rng = np.random.default_rng(seed)
    archive = ParetoArchive(objective_names, tuple(bounds))
    for u in rng.random((n, len(bounds))):
        x = from_unit(u, bounds)
        f, c = evaluate(x)
        archive.add(x, f, c, round=0)
    return archive
