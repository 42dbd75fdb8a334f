"""Stacked affine autoregressive flow over the row-major flattening of U.

Each layer maps ``x -> x * exp(a(x_<i)) + b(x_<i)`` where the per-coordinate
log-scale ``a`` and shift ``b`` come from a one-hidden-layer masked network.
Conditioning on the *input* makes the sampling direction a single parallel
pass (as training needs); the inverse is solved one coordinate at a time.
Odd-indexed layers use the reversed coordinate order.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Tuple

import torch
import torch.nn as nn

from .numeric import DTYPE, DimensionError, NumericError


def made_masks(d: int, hidden: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Input->hidden and hidden->output masks for autoregressive order 1..d."""
    in_deg = torch.arange(1, d + 1)
    if d == 1:
        return torch.zeros(hidden, d, dtype=DTYPE), torch.zeros(2 * d, hidden, dtype=DTYPE)
    hid_deg = torch.arange(hidden) % (d - 1) + 1
    mask_in = (hid_deg[:, None] >= in_deg[None, :]).to(DTYPE)
    out_deg = torch.cat([in_deg, in_deg])
    mask_out = (out_deg[:, None] > hid_deg[None, :]).to(DTYPE)
    return mask_in, mask_out


class MaskedAffineLayer(nn.Module):
    def __init__(self, d: int, reverse: bool = False, hidden: Optional[int] = None,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        hidden = hidden or 2 * d
        self.d, self.hidden, self.reverse = d, hidden, reverse
        mask_in, mask_out = made_masks(d, hidden)
        self.register_buffer("mask_in", mask_in)
        self.register_buffer("mask_out", mask_out)
        bound = 1.0 / math.sqrt(d)
        self.w_in = nn.Parameter((torch.rand(hidden, d, dtype=DTYPE, generator=generator) * 2 - 1) * bound)
        self.b_in = nn.Parameter((torch.rand(hidden, dtype=DTYPE, generator=generator) * 2 - 1) * bound)
        # zero output layer: the layer starts as the identity map
        self.w_out = nn.Parameter(torch.zeros(2 * d, hidden, dtype=DTYPE))
        self.b_out = nn.Parameter(torch.zeros(2 * d, dtype=DTYPE))

    def conditioner(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = torch.tanh(x @ (self.w_in * self.mask_in).T + self.b_in)
        out = h @ (self.w_out * self.mask_out).T + self.b_out
        shift, log_scale = out[..., : self.d], out[..., self.d :]
        return shift, log_scale

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.reverse:
            x = x.flip(-1)
        shift, log_scale = self.conditioner(x)
        y = x * torch.exp(log_scale) + shift
        if self.reverse:
            y = y.flip(-1)
        return y, log_scale.sum(-1)

    def inverse(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(x, log|det J|(x))`` with ``forward(x) == y``."""
        if self.reverse:
            y = y.flip(-1)
        x = torch.zeros_like(y)
        for i in range(self.d):
            shift, log_scale = self.conditioner(x)
            scale = torch.exp(log_scale[..., i])
            if not bool((scale > 0).all()):
                raise NumericError(f"scale underflow while inverting coordinate {i}")
            x = x.clone()
            x[..., i] = (y[..., i] - shift[..., i]) / scale
        _, log_scale = self.conditioner(x)
        if self.reverse:
            x = x.flip(-1)
        return x, log_scale.sum(-1)


class FlowStack(nn.Module):
    """``L`` masked affine layers; ``L = 0`` is the identity."""

    def __init__(self, d: int, depth: int = 1, generator: Optional[torch.Generator] = None,
                 hidden: Optional[int] = None):
        super().__init__()
        if depth < 0:
            raise ValueError("flow depth must be >= 0")
        self.d = d
        self.layers = nn.ModuleList(
            MaskedAffineLayer(d, reverse=bool(i % 2), hidden=hidden, generator=generator) for i in range(depth)
        )

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Flat ``(..., d)`` input to ``(T(x), log|det J_T(x)|)``."""
        if x.shape[-1] != self.d:
            raise DimensionError(f"flow expects trailing dim {self.d}, got {x.shape[-1]}")
        logdet = torch.zeros(x.shape[:-1], dtype=x.dtype)
        for layer in self.layers:
            x, ld = layer(x)
            logdet = logdet + ld
        if not bool(torch.isfinite(logdet).all() and torch.isfinite(x).all()):
            raise NumericError("flow produced non-finite output")
        return x, logdet

    def inverse(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(T^{-1}(y), log|det J_T(T^{-1}(y))|)``."""
        logdet = torch.zeros(y.shape[:-1], dtype=y.dtype)
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y)
            logdet = logdet + ld
        return y, logdet


def _flatten(u: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, ...]]:
    return u.reshape(*u.shape[:-2], -1), tuple(u.shape[-2:])


def forward_with_logdet(flow: Optional[FlowStack], u0: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Push matrices ``(..., r, c)`` through the flow in row-major coordinate order."""
    if flow is None or flow.depth == 0:
        return u0, torch.zeros(u0.shape[:-2], dtype=u0.dtype)
    flat, shape = _flatten(u0)
    y, logdet = flow(flat)
    return y.reshape(*y.shape[:-1], *shape), logdet


def inverse_with_logdet(flow: Optional[FlowStack], u: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if flow is None or flow.depth == 0:
        return u, torch.zeros(u.shape[:-2], dtype=u.dtype)
    flat, shape = _flatten(u)
    x, logdet = flow.inverse(flat)
    return x.reshape(*x.shape[:-1], *shape), logdet


def density_under_flow(flow: Optional[FlowStack], base_logdensity: Callable[[torch.Tensor], torch.Tensor],
                       u: torch.Tensor) -> torch.Tensor:
    """``log q(u) = log q0(T^{-1}(u)) - log|det J_T(T^{-1}(u))|``."""
    u0, logdet = inverse_with_logdet(flow, u)
    return base_logdensity(u0) - logdet
