"""Low-rank-plus-diagonal covariance factors and their projection operators.

A factor with parameters ``Z`` (inducing_dim x target_dim) and positive ``D``
defines ``K = Z Z^T + diag(D^2)``. The row projector ``Z^T K^{-1}`` maps the
inducing row space onto the target rows, the column projector ``K^{-1} Z``
maps onto the target columns, so ``T_row @ U @ T_col`` has the target shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numeric import (
    DTYPE,
    DimensionError,
    ParameterError,
    as_matrix,
    cho_solve,
    cholesky,
    logdet_psd,
)

JITTER = 1e-8


def softplus_inverse(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


def assemble_k(z, d) -> torch.Tensor:
    """``Z Z^T + diag(D^2)``; every entry of ``d`` must be positive."""
    z, d = as_matrix(z), as_matrix(d)
    if d.ndim != 1 or d.shape[0] != z.shape[0]:
        raise DimensionError(f"D has shape {tuple(d.shape)}, expected ({z.shape[0]},)")
    if not bool((d > 0).all()):
        raise ParameterError("diagonal noise D must be strictly positive")
    return z @ z.T + torch.diag(d * d)


class CovarianceFactor(nn.Module):
    """Learnable ``(Z, D)`` pair; ``D`` is stored through a softplus."""

    def __init__(self, inducing_dim: int, target_dim: int, d_init: float = 0.1,
                 generator: Optional[torch.Generator] = None, cache_cholesky: bool = True):
        super().__init__()
        # N(0, 1/sqrt(inducing_dim)) read as a standard deviation
        std = inducing_dim ** -0.5
        z = torch.randn(inducing_dim, target_dim, dtype=DTYPE, generator=generator) * std
        self.z = nn.Parameter(z)
        self.d_raw = nn.Parameter(softplus_inverse(torch.full((inducing_dim,), float(d_init), dtype=DTYPE)))
        self.cache_cholesky = cache_cholesky
        self._cache = None

    @classmethod
    def from_values(cls, z, d) -> "CovarianceFactor":
        z, d = as_matrix(z), as_matrix(d)
        assemble_k(z, d)  # validates
        f = cls(z.shape[0], z.shape[1])
        with torch.no_grad():
            f.z.copy_(z)
            f.d_raw.copy_(softplus_inverse(d))
        return f

    @property
    def inducing_dim(self) -> int:
        return self.z.shape[0]

    @property
    def target_dim(self) -> int:
        return self.z.shape[1]

    @property
    def d(self) -> torch.Tensor:
        return F.softplus(self.d_raw)

    def k(self) -> torch.Tensor:
        return assemble_k(self.z, self.d)

    def chol(self) -> torch.Tensor:
        # Cached only outside autograd: a graph-carrying factor cannot be reused
        # across backward passes. Parameter versions invalidate the cache.
        key = (self.z._version, self.d_raw._version, self.z.data_ptr())
        use_cache = self.cache_cholesky and not torch.is_grad_enabled()
        if use_cache and self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        chol = cholesky(self.k(), jitter=JITTER)
        if use_cache:
            self._cache = (key, chol)
        return chol

    def invalidate(self) -> None:
        self._cache = None

    def projector(self, side: str) -> torch.Tensor:
        return projector(self, side)


def projector(f: CovarianceFactor, side: str) -> torch.Tensor:
    """Row side: ``Z^T K^{-1}`` (target x inducing). Col side: ``K^{-1} Z`` (inducing x target)."""
    chol = f.chol()
    kinv_z = cho_solve(chol, f.z)
    if side == "row":
        return kinv_z.T  # K symmetric
    if side == "col":
        return kinv_z
    raise ValueError(f"side must be 'row' or 'col', got {side!r}")


@dataclass
class ProjectorPair:
    t_row: torch.Tensor
    t_col: torch.Tensor

    def apply(self, u: torch.Tensor) -> torch.Tensor:
        """``T_row @ U @ T_col``, batched over leading dims of ``u``."""
        if u.shape[-2] != self.t_row.shape[1] or u.shape[-1] != self.t_col.shape[0]:
            raise DimensionError(
                f"U of shape {tuple(u.shape[-2:])} does not fit projectors "
                f"{tuple(self.t_row.shape)} / {tuple(self.t_col.shape)}"
            )
        return self.t_row @ u @ self.t_col

    @property
    def target_shape(self):
        return (self.t_row.shape[0], self.t_col.shape[1])


def batched_projectors(factors, sides):
    """Projectors of several factors sharing one inducing dim from a single batched Cholesky.

    Each ``Z`` is zero-padded to a common width, which leaves ``K`` unchanged.
    Falls back to per-factor factorization (with the jitter retry) on failure.
    """
    width = max(f.target_dim for f in factors)
    z = torch.stack([F.pad(f.z, (0, width - f.target_dim)) for f in factors])
    d = torch.stack([f.d for f in factors])
    k = z @ z.transpose(-2, -1) + torch.diag_embed(d * d)
    chol, info = torch.linalg.cholesky_ex(k)
    if bool(info.any()):
        return [projector(f, side) for f, side in zip(factors, sides)]
    kinv_z = torch.cholesky_solve(z, chol)
    out = []
    for i, (f, side) in enumerate(zip(factors, sides)):
        t = kinv_z[i, :, : f.target_dim]
        out.append(t.T if side == "row" else t)
    return out


def kron_logdet(k_r, k_c) -> torch.Tensor:
    """``log|K_c (x) K_r| = c log|K_r| + r log|K_c|``."""
    k_r, k_c = as_matrix(k_r), as_matrix(k_c)
    r, c = k_r.shape[0], k_c.shape[0]
    return c * logdet_psd(k_r) + r * logdet_psd(k_c)


def vec(u: torch.Tensor) -> torch.Tensor:
    """Column-stacking vectorization, the convention behind ``vec(AXB) = (B^T (x) A) vec(X)``."""
    return u.T.reshape(-1)


def unvec(v: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    return v.reshape(cols, rows).T


def sample_matrix_normal(mean, row_chol, col_chol, rng: torch.Generator, n: Optional[int] = None) -> torch.Tensor:
    """``mean + L_r E L_c^T`` with ``E`` standard normal; ``n`` draws stacked on dim 0 if given."""
    mean, row_chol, col_chol = as_matrix(mean), as_matrix(row_chol), as_matrix(col_chol)
    p, q = mean.shape
    if row_chol.shape != (p, p) or col_chol.shape != (q, q):
        raise DimensionError(
            f"mean {tuple(mean.shape)} incompatible with factors {tuple(row_chol.shape)}, {tuple(col_chol.shape)}"
        )
    shape = (p, q) if n is None else (n, p, q)
    e = torch.randn(shape, dtype=DTYPE, generator=rng)
    return mean + row_chol @ e @ col_chol.T

