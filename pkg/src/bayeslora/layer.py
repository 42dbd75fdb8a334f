"""Stochastic low-rank adapter layers.

``BayesLoraLayer`` wraps a frozen weight ``W_pre``. One inducing draw ``U``
per Monte Carlo sample feeds both branches: ``A_bar = T_r^A U T_c^A`` and
``B_bar = T_r^B U T_c^B``, each perturbed by ``lambda * Sigma^{1/2} * eps``,
and the update is ``(alpha / r) B A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .flow import FlowStack, forward_with_logdet
from .fused import FusedAdapterDraw, fused_params, layer_meta
from .kron import CovarianceFactor, ProjectorPair, batched_projectors
from .numeric import DTYPE, DimensionError, as_matrix
from .posterior import InducingPosterior


class NoiseScale(nn.Module):
    """Conditional noise scale ``lambda`` in ``(0, max_lambda]``.

    Learnable values go through ``max_lambda * sigmoid(raw)``. When
    ``learn`` is off (or ``init == max``) lambda is a fixed buffer.
    """

    def __init__(self, init: float = 1e-3, max_lambda: float = 0.03, learn: bool = True):
        super().__init__()
        if not 0 < init <= max_lambda:
            raise ValueError("need 0 < init_lambda <= max_lambda")
        self.max_lambda = float(max_lambda)
        self.learn = bool(learn) and init < max_lambda
        if self.learn:
            p = init / max_lambda
            self.raw = nn.Parameter(torch.tensor(math.log(p / (1 - p)), dtype=DTYPE))
        else:
            self.register_buffer("fixed", torch.tensor(float(init), dtype=DTYPE))

    def forward(self) -> torch.Tensor:
        if self.learn:
            return self.max_lambda * torch.sigmoid(self.raw)
        return self.fixed


@dataclass
class AdapterDraw:
    """A batch of ``s`` adapter realizations for one layer."""

    a: torch.Tensor  # (s, r, d_in)
    b: torch.Tensor  # (s, d_out, r)
    u: Optional[torch.Tensor] = None  # (s, r_ind, c_ind), post-flow
    u0: Optional[torch.Tensor] = None
    logdet: Optional[torch.Tensor] = None
    kl: Optional[torch.Tensor] = None  # inducing KL, when computed alongside the draw
    kl_stderr: float = 0.0


@dataclass
class AdapterSample:
    a: torch.Tensor
    b: torch.Tensor
    delta_w: torch.Tensor
    u_raw: Optional[torch.Tensor]


class BayesLoraLayer(nn.Module):
    def __init__(self, w_pre, bias=None, rank: int = 8, alpha: float = 16.0, inducing_rows: int = 9,
                 inducing_cols: int = 9, flow_depth: int = 1, noise_scale: Optional[NoiseScale] = None,
                 max_sd_u: float = 0.1, init_sd_u: Optional[float] = None, init_mean_sd: float = 1e-2,
                 prior_sd: float = 0.1, sqrt_width_scaling: bool = True, whitened: bool = True,
                 cache_cholesky: bool = True, fused: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        w_pre = as_matrix(w_pre).detach().clone()
        self.register_buffer("w_pre", w_pre)
        self.register_buffer("bias", None if bias is None else as_matrix(bias).detach().clone())
        d_out, d_in = w_pre.shape
        self.d_out, self.d_in, self.rank, self.alpha = d_out, d_in, rank, float(alpha)
        self.inducing_rows, self.inducing_cols = inducing_rows, inducing_cols

        def factor(ind, tgt):
            return CovarianceFactor(ind, tgt, d_init=0.1, generator=generator, cache_cholesky=cache_cholesky)

        self.row_a = factor(inducing_rows, rank)
        self.col_a = factor(inducing_cols, d_in)
        self.row_b = factor(inducing_rows, d_out)
        self.col_b = factor(inducing_cols, rank)
        self.posterior = InducingPosterior(inducing_rows, inducing_cols, max_sd_u=max_sd_u, init_sd=init_sd_u,
                                           init_mean_sd=init_mean_sd, whitened=whitened, generator=generator)
        self.flow = FlowStack(inducing_rows * inducing_cols, flow_depth, generator=generator)
        # may be shared across layers; module.parameters() de-duplicates
        self.noise_scale = noise_scale if noise_scale is not None else NoiseScale()
        self.cache_cholesky = cache_cholesky
        self._proj_cache = None
        # single-node numpy kernel; only the whitened prior is supported there
        self.fused = fused and whitened
        self._meta = None
        self.sigma_half_a = prior_sd / math.sqrt(d_in) if sqrt_width_scaling else prior_sd
        self.sigma_half_b = prior_sd / math.sqrt(rank) if sqrt_width_scaling else prior_sd

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_w(self) -> int:
        return self.d_out * self.d_in

    def projectors(self):
        factors = (self.row_a, self.col_a, self.row_b, self.col_b)
        sides = ("row", "col", "row", "col")
        key = tuple((f.z._version, f.d_raw._version) for f in factors)
        use_cache = self.cache_cholesky and not torch.is_grad_enabled()
        if use_cache and self._proj_cache is not None and self._proj_cache[0] == key:
            return self._proj_cache[1]
        if self.inducing_rows == self.inducing_cols:
            t = batched_projectors(factors, sides)
        else:
            t = [None] * 4
            t[0], t[2] = batched_projectors((self.row_a, self.row_b), ("row", "row"))
            t[1], t[3] = batched_projectors((self.col_a, self.col_b), ("col", "col"))
        pairs = ProjectorPair(t[0], t[1]), ProjectorPair(t[2], t[3])
        if use_cache:
            self._proj_cache = (key, pairs)
        return pairs

    def draw(self, s: int, generator: torch.Generator) -> AdapterDraw:
        if s < 1:
            raise ValueError("need at least one sample")
        if self.fused:
            return self._fused_draw(s, generator)
        pa, pb = self.projectors()
        u0 = self.posterior.rsample(s, generator)
        u, logdet = forward_with_logdet(self.flow, u0)
        eps_a = torch.randn(s, self.rank, self.d_in, dtype=DTYPE, generator=generator)
        eps_b = torch.randn(s, self.d_out, self.rank, dtype=DTYPE, generator=generator)
        lam = self.noise_scale()
        a = pa.apply(u) + lam * self.sigma_half_a * eps_a
        b = pb.apply(u) + lam * self.sigma_half_b * eps_b
        return AdapterDraw(a=a, b=b, u=u, u0=u0, logdet=logdet)

    def invalidate(self) -> None:
        """Drop cached factorizations (needed after out-of-band parameter writes)."""
        self._proj_cache = None
        for f in (self.row_a, self.col_a, self.row_b, self.col_b):
            f.invalidate()

    def _fused_draw(self, s: int, generator: torch.Generator) -> AdapterDraw:
        if self._meta is None:
            self._meta = layer_meta(self)
        # same stream consumption as the composed path
        eps_u = torch.randn(s, self.inducing_rows, self.inducing_cols, dtype=DTYPE, generator=generator)
        eps_a = torch.randn(s, self.rank, self.d_in, dtype=DTYPE, generator=generator)
        eps_b = torch.randn(s, self.d_out, self.rank, dtype=DTYPE, generator=generator)
        a, b, kl, se, u, u0, logdet = FusedAdapterDraw.apply(self._meta, eps_u, eps_a, eps_b, self.flow.depth,
                                                             *fused_params(self))
        return AdapterDraw(a=a, b=b, u=u, u0=u0, logdet=logdet, kl=kl, kl_stderr=float(se))

    def apply(self, x: torch.Tensor, draw: AdapterDraw) -> torch.Tensor:
        """Row-batch forward: ``x`` is ``(N, d_in)`` or ``(S, N, d_in)``; returns ``(S, N, d_out)``."""
        return _lora_apply(x, self.w_pre, self.bias, draw, self.scaling)

    def mean_draw(self) -> AdapterDraw:
        """Noise-free adapters at the flow-pushed posterior mean ``T(m)``."""
        pa, pb = self.projectors()
        u, _ = forward_with_logdet(self.flow, self.posterior.mean[None])
        return AdapterDraw(a=pa.apply(u), b=pb.apply(u), u=u)

    def merge_deterministic(self) -> torch.Tensor:
        d = self.mean_draw()
        return self.w_pre + self.scaling * d.b[0] @ d.a[0]


class LoraLayer(nn.Module):
    """Deterministic LoRA: ``A`` random, ``B`` zero at init."""

    def __init__(self, w_pre, bias=None, rank: int = 8, alpha: float = 16.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        w_pre = as_matrix(w_pre).detach().clone()
        self.register_buffer("w_pre", w_pre)
        self.register_buffer("bias", None if bias is None else as_matrix(bias).detach().clone())
        d_out, d_in = w_pre.shape
        self.d_out, self.d_in, self.rank, self.alpha = d_out, d_in, rank, float(alpha)
        bound = 1.0 / math.sqrt(d_in)
        self.a = nn.Parameter((torch.rand(rank, d_in, dtype=DTYPE, generator=generator) * 2 - 1) * bound)
        self.b = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_w(self) -> int:
        return self.d_out * self.d_in

    def draw(self, s: int, generator: Optional[torch.Generator] = None) -> AdapterDraw:
        return AdapterDraw(a=self.a[None], b=self.b[None])

    def apply(self, x: torch.Tensor, draw: AdapterDraw) -> torch.Tensor:
        return _lora_apply(x, self.w_pre, self.bias, draw, self.scaling)

    def merge_deterministic(self) -> torch.Tensor:
        return self.w_pre + self.scaling * self.b @ self.a


def _lora_apply(x, w_pre, bias, draw: AdapterDraw, scaling: float) -> torch.Tensor:
    """``x`` carries a leading sample axis (size S or 1); 2-d input gets one added."""
    if x.shape[-1] != w_pre.shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} features, layer expects {w_pre.shape[1]}")
    if x.ndim == 2:
        x = x.unsqueeze(0)
    base = x @ w_pre.T
    if bias is not None:
        base = base + bias
    extra = (1,) * (x.ndim - 3)
    a_t = draw.a.transpose(-2, -1).reshape(draw.a.shape[0], *extra, draw.a.shape[2], draw.a.shape[1])
    b_t = draw.b.transpose(-2, -1).reshape(draw.b.shape[0], *extra, draw.b.shape[2], draw.b.shape[1])
    # never materialize delta_w: B (A x)
    return base + scaling * ((x @ a_t) @ b_t)


def sample_adapters(layer: BayesLoraLayer, s: int, rng: torch.Generator) -> List[AdapterSample]:
    draw = layer.draw(s, rng)
    return [
        AdapterSample(a=draw.a[i], b=draw.b[i], delta_w=layer.scaling * draw.b[i] @ draw.a[i], u_raw=draw.u[i])
        for i in range(s)
    ]


def forward(layer, x, samples: List[AdapterSample]) -> List[torch.Tensor]:
    """Column-batch forward ``W_pre x + (alpha/r) B (A x)`` for each sample."""
    x = as_matrix(x)
    if x.shape[0] != layer.d_in:
        raise DimensionError(f"x must have {layer.d_in} rows, got {x.shape[0]}")
    out = []
    for smp in samples:
        y = layer.w_pre @ x + layer.scaling * (smp.b @ (smp.a @ x))
        if layer.bias is not None:
            y = y + layer.bias[:, None]
        out.append(y)
    return out


def merge_deterministic(layer) -> torch.Tensor:
    return layer.merge_deterministic()
