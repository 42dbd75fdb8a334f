"""Variational base distribution over the inducing matrix and the KL terms.

The base ``q0`` is a diagonal Gaussian over the entries of ``U`` (shape
``rows x cols``). Closed forms are provided for the Gaussian KL, its whitened
special case and the conditional KL in ``lambda``; the flow-augmented KL is
estimated by Monte Carlo with its standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import torch
import torch.nn as nn

from .flow import FlowStack, forward_with_logdet
from .kron import vec
from .numeric import DTYPE, DimensionError, NumericError, ParameterError, as_matrix, cho_solve, cholesky

LOG_2PI = math.log(2 * math.pi)


class InducingPosterior(nn.Module):
    """Diagonal Gaussian ``q0`` over ``U``; ``sigma = min(exp(log_sigma), max_sd_u)``."""

    def __init__(self, rows: int, cols: int, max_sd_u: float = 0.1, init_sd: Optional[float] = None,
                 init_mean_sd: float = 0.0, whitened: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.max_sd_u = float(max_sd_u)
        self.whitened = whitened
        init_sd = 0.5 * self.max_sd_u if init_sd is None else init_sd
        mean = torch.randn(rows, cols, dtype=DTYPE, generator=generator) * init_mean_sd
        self.mean = nn.Parameter(mean)
        self.log_sigma = nn.Parameter(torch.full((rows, cols), math.log(init_sd), dtype=DTYPE))

    @property
    def d(self) -> int:
        return self.rows * self.cols

    @property
    def sigma(self) -> torch.Tensor:
        return torch.clamp(torch.exp(self.log_sigma), max=self.max_sd_u)

    @property
    def m(self) -> torch.Tensor:
        """Mean as a column-stacked vector."""
        return vec(self.mean)

    def rsample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        eps = torch.randn(n, self.rows, self.cols, dtype=DTYPE, generator=generator)
        return self.mean + self.sigma * eps

    def log_prob(self, u0: torch.Tensor) -> torch.Tensor:
        sigma = self.sigma
        z = (u0 - self.mean) / sigma
        return -0.5 * (z * z + 2 * torch.log(sigma) + LOG_2PI).sum(dim=(-2, -1))


@dataclass
class KlReport:
    kl_u: float
    kl_w: float
    method: str  # "closed_form" | "monte_carlo"
    n_samples: int = 0
    stderr: float = 0.0


def gaussian_kl(m_q, s_q_diag, m_p, k_p) -> torch.Tensor:
    """``KL(N(m_q, diag(s_q)) || N(m_p, K_p))``; ``s_q_diag`` holds variances."""
    m_q, s_q, m_p, k_p = (as_matrix(v) for v in (m_q, s_q_diag, m_p, k_p))
    d = m_q.shape[0]
    if s_q.shape != (d,) or m_p.shape != (d,) or k_p.shape != (d, d):
        raise DimensionError("gaussian_kl operands have inconsistent dimensions")
    chol = cholesky(k_p)
    kinv_diag = torch.diagonal(cho_solve(chol, torch.eye(d, dtype=DTYPE)))
    diff = (m_p - m_q)[:, None]
    maha = (diff * cho_solve(chol, diff)).sum()
    logdet_p = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return 0.5 * ((kinv_diag * s_q).sum() + maha - d + logdet_p - torch.log(s_q).sum())


def whitened_kl_terms(mean: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    var = sigma * sigma
    return 0.5 * (var.sum() + (mean * mean).sum() - mean.numel() - torch.log(var).sum())


def whitened_kl(post: InducingPosterior) -> torch.Tensor:
    """KL of ``q0`` against the standard normal prior."""
    if not post.whitened:
        raise ParameterError("whitened_kl requires a whitened posterior")
    return whitened_kl_terms(post.mean, post.sigma)


def conditional_kl(lam, d_total: int):
    """``(D/2)(lambda^2 - 1 - 2 log lambda)``; works on floats and tensors."""
    if isinstance(lam, torch.Tensor):
        if not bool((lam > 0).all()):
            raise ParameterError("lambda must be positive")
        return 0.5 * d_total * (lam * lam - 1 - 2 * torch.log(lam))
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    return 0.5 * d_total * (lam * lam - 1 - 2 * math.log(lam))


def standard_normal_logdensity(u: torch.Tensor) -> torch.Tensor:
    return -0.5 * (u * u + LOG_2PI).sum(dim=(-2, -1))


def matrix_normal_logdensity(k_r: torch.Tensor, k_c: torch.Tensor) -> Callable[[torch.Tensor], torch.Tensor]:
    """Log-density of ``vec(U) ~ N(0, K_c (x) K_r)`` without forming the Kronecker product."""
    l_r, l_c = cholesky(k_r), cholesky(k_c)
    r, c = k_r.shape[0], k_c.shape[0]
    logdet = c * 2.0 * torch.log(torch.diagonal(l_r)).sum() + r * 2.0 * torch.log(torch.diagonal(l_c)).sum()

    def logp(u: torch.Tensor) -> torch.Tensor:
        # tr(K_c^{-1} U^T K_r^{-1} U) = ||L_r^{-1} U L_c^{-T}||_F^2
        a = torch.linalg.solve_triangular(l_r, u, upper=False)
        b = torch.linalg.solve_triangular(l_c, a.transpose(-2, -1), upper=False)
        return -0.5 * ((b * b).sum(dim=(-2, -1)) + logdet + r * c * LOG_2PI)

    return logp


def mc_flow_kl(post: InducingPosterior, flow: Optional[FlowStack],
               prior_logdensity: Callable[[torch.Tensor], torch.Tensor], n: int,
               rng: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Monte Carlo ``KL(T#q0 || p)`` and its standard error.

    Each draw contributes ``log q0(U0) - log|det J_T(U0)| - log p(T(U0))``.
    """
    if n < 1:
        raise ParameterError("need at least one sample")
    u0 = post.rsample(n, rng)
    return flow_kl_from_draws(post, flow, prior_logdensity, u0)


def flow_kl_from_draws(post: InducingPosterior, flow: Optional[FlowStack],
                       prior_logdensity: Callable[[torch.Tensor], torch.Tensor],
                       u0: torch.Tensor, u: Optional[torch.Tensor] = None,
                       logdet: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """MC KL from existing base draws; pass the pushed ``u`` and ``logdet`` to skip the flow pass."""
    if u is None or logdet is None:
        u, logdet = forward_with_logdet(flow, u0)
    terms = post.log_prob(u0) - logdet - prior_logdensity(u)
    bad = ~torch.isfinite(terms)
    if bool(bad.any()):
        idx = int(torch.nonzero(bad)[0, 0])
        raise NumericError(f"non-finite KL contribution at sample {idx}")
    n = terms.shape[0]
    stderr = terms.detach().std(unbiased=True) / math.sqrt(n) if n > 1 else torch.zeros((), dtype=DTYPE)
    return terms.mean(), stderr
