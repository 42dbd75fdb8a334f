"""One-node forward/backward for a whitened Bayesian adapter draw.

Composed from autograd primitives, a layer draw plus its KL term is a few
hundred tiny tensor ops, and at toy widths their dispatch cost dwarfs the
arithmetic. Here the same quantities (sampled ``A``, ``B`` and the inducing
KL) come from compiled kernels with a hand-derived backward, so each layer is
one graph node. The composed path in ``layer.py`` stays the reference; tests
hold the two to agreement in values and gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from numba import njit

from .kron import JITTER
from .numeric import DTYPE, DecompositionError, NumericError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)

OK, FLOW_NONFINITE, KL_NONFINITE = 0, 1, 2


@njit(cache=True)
def _softplus(x):
    out = np.empty_like(x)
    for i in range(x.size):
        # torch's default threshold: linear above 20
        out[i] = x[i] if x[i] > 20.0 else np.log1p(np.exp(x[i]))
    return out


@njit(cache=True)
def _softplus_grad(x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = 1.0 if x[i] > 20.0 else 1.0 / (1.0 + np.exp(-x[i]))
    return out


@njit(cache=True)
def _cholesky(k):
    """Lower factor and LAPACK-style info (1-based failing minor, 0 on success)."""
    n = k.shape[0]
    l = np.zeros((n, n))
    for j in range(n):
        s = k[j, j]
        for p in range(j):
            s -= l[j, p] * l[j, p]
        if not s > 0.0:
            return l, j + 1
        l[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = k[i, j]
            for p in range(j):
                t -= l[i, p] * l[j, p]
            l[i, j] = t / l[j, j]
    return l, 0


@njit(cache=True)
def _cho_solve(l, b):
    n, m = b.shape
    x = b.copy()
    for c in range(m):
        for i in range(n):
            t = x[i, c]
            for p in range(i):
                t -= l[i, p] * x[p, c]
            x[i, c] = t / l[i, i]
        for i in range(n - 1, -1, -1):
            t = x[i, c]
            for p in range(i + 1, n):
                t -= l[p, i] * x[p, c]
            x[i, c] = t / l[i, i]
    return x


@njit(cache=True)
def _factor_forward(z, raw, jitter):
    """``D``, Cholesky of ``K = Z Z^T + diag(D^2) (+ jitter I)``, ``K^{-1} Z`` and info."""
    d = _softplus(raw)
    k = z @ z.T
    for i in range(k.shape[0]):
        k[i, i] += d[i] * d[i] + jitter
    l, info = _cholesky(k)
    if info:
        return d, l, z.copy(), info
    return d, l, _cho_solve(l, z), 0


@njit(cache=True)
def _factor_backward(l, t, z, d, raw, g_t):
    """Gradients of ``<g_t, K^{-1} Z>`` w.r.t. ``Z`` and the raw diagonal."""
    x = _cho_solve(l, g_t)
    m = x @ t.T
    g_z = x - (m + m.T) @ z
    g_raw = np.empty_like(d)
    sg = _softplus_grad(raw)
    for i in range(d.size):
        g_raw[i] = -2.0 * d[i] * m[i, i] * sg[i]
    return g_z, g_raw


# Explicit loops below: numba's broadcasting setitem into slices of 3-d arrays
# is several times slower than plain element loops at these sizes.


@njit(cache=True)
def _masked(w, m):
    out = np.empty(w.shape)
    for j in range(w.shape[0]):
        for k in range(w.shape[1]):
            out[j, k] = w[j, k] * m[j, k]
    return out


@njit(cache=True)
def _store(dst, li, src):
    for j in range(src.shape[0]):
        for k in range(src.shape[1]):
            dst[li, j, k] = src[j, k]


@njit(cache=True)
def _store_masked(dst, li, src, m):
    for j in range(src.shape[0]):
        for k in range(src.shape[1]):
            dst[li, j, k] = src[j, k] * m[j, k]


@njit(cache=True)
def _store_colsum(dst, li, src):
    for k in range(src.shape[1]):
        acc = 0.0
        for i in range(src.shape[0]):
            acc += src[i, k]
        dst[li, k] = acc


@njit(cache=True)
def _flip_cols(x):
    n = x.shape[1]
    out = np.empty_like(x)
    for j in range(n):
        out[:, j] = x[:, n - 1 - j]
    return out


@njit(cache=True)
def _draw_forward(t_ra, t_ca, t_rb, t_cb, mean, log_sigma, w_in, b_in, w_out, b_out, m_in, m_out, rev,
                  lam, max_sd, sa, sb, eps_u, eps_a, eps_b):
    s, r, c = eps_u.shape
    d = r * c
    depth = w_in.shape[0]
    sig_raw = np.exp(log_sigma)
    sigma = np.minimum(sig_raw, max_sd)
    u0 = np.empty_like(eps_u)
    for i in range(s):
        u0[i] = mean + sigma * eps_u[i]

    hidden = w_in.shape[1] if depth > 0 else 0
    xs = np.empty((depth, s, d))
    hs = np.empty((depth, s, hidden))
    es = np.empty((depth, s, d))
    x = u0.reshape(s, d).copy()
    logdet = np.zeros(s)
    for li in range(depth):
        xi = _flip_cols(x) if rev[li] else x
        wi = _masked(w_in[li], m_in[li])
        wo = _masked(w_out[li], m_out[li])
        h = np.tanh(xi @ wi.T + b_in[li])
        out = h @ wo.T + b_out[li]
        e = np.exp(out[:, d:])
        y = xi * e + out[:, :d]
        for i in range(s):
            logdet[i] += out[i, d:].sum()
        _store(xs, li, xi)
        _store(hs, li, h)
        _store(es, li, e)
        x = _flip_cols(y) if rev[li] else y
    status, aux = OK, 0
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(logdet))):
        status = FLOW_NONFINITE
    u = x.reshape(s, r, c)

    rank, d_in = t_ra.shape[0], t_ca.shape[1]
    d_out = t_rb.shape[0]
    a = np.empty((s, rank, d_in))
    b = np.empty((s, d_out, rank))
    p_a = np.empty((s, r, d_in))
    q_a = np.empty((s, rank, c))
    p_b = np.empty((s, r, rank))
    q_b = np.empty((s, d_out, c))
    for i in range(s):
        ui = np.ascontiguousarray(u[i])
        p_a[i] = ui @ t_ca
        q_a[i] = t_ra @ ui
        p_b[i] = ui @ t_cb
        q_b[i] = t_rb @ ui
        a[i] = t_ra @ p_a[i] + lam * sa * eps_a[i]
        b[i] = t_rb @ p_b[i] + lam * sb * eps_b[i]

    if depth > 0:
        terms = np.empty(s)
        log_norm = np.log(sigma).sum()
        for i in range(s):
            zq = (u0[i] - mean) / sigma
            log_q0 = -0.5 * ((zq * zq).sum() + 2.0 * log_norm + d * LOG_2PI)
            log_p = -0.5 * ((u[i] * u[i]).sum() + d * LOG_2PI)
            terms[i] = log_q0 - logdet[i] - log_p
        for i in range(s):
            if status == OK and not np.isfinite(terms[i]):
                status, aux = KL_NONFINITE, i
        kl = terms.mean()
        se = 0.0
        if s > 1:
            dev = terms - kl
            se = np.sqrt((dev * dev).sum() / (s - 1)) / np.sqrt(s)
    else:
        var = sigma * sigma
        kl = 0.5 * (var.sum() + (mean * mean).sum() - mean.size - np.log(var).sum())
        se = 0.0
    return a, b, kl, se, u, u0, logdet, sigma, sig_raw, xs, hs, es, p_a, q_a, p_b, q_b, status, aux


@njit(cache=True)
def _draw_backward(t_ra, t_ca, t_rb, t_cb, mean, w_in, w_out, m_in, m_out, rev, max_sd, sa, sb,
                   eps_u, eps_a, eps_b, u, sigma, sig_raw, xs, hs, es, p_a, q_a, p_b, q_b, g_a, g_b, g_kl):
    s, r, c = eps_u.shape
    d = r * c
    depth = w_in.shape[0]
    g_lam = sa * (g_a * eps_a).sum() + sb * (g_b * eps_b).sum()
    g_tra = np.zeros(t_ra.shape)
    g_tca = np.zeros(t_ca.shape)
    g_trb = np.zeros(t_rb.shape)
    g_tcb = np.zeros(t_cb.shape)
    g_u = np.empty((s, r, c))
    for i in range(s):
        ga, gb = np.ascontiguousarray(g_a[i]), np.ascontiguousarray(g_b[i])
        g_tra += ga @ p_a[i].T
        g_tca += q_a[i].T @ ga
        g_trb += gb @ p_b[i].T
        g_tcb += q_b[i].T @ gb
        g_u[i] = t_ra.T @ ga @ t_ca.T + t_rb.T @ gb @ t_cb.T

    g_sigma = np.zeros_like(sigma)
    g_mean = np.zeros_like(sigma)
    if depth > 0:
        g_terms = g_kl / s
        for i in range(s):
            g_u[i] += g_terms * u[i]
        g_ld = -g_terms
        g_sigma -= g_kl / sigma
    else:
        g_ld = 0.0
        g_mean += g_kl * mean
        g_sigma += g_kl * (sigma - 1.0 / sigma)

    g_w_in = np.empty(w_in.shape)
    g_b_in = np.empty((depth, w_in.shape[1] if depth > 0 else 0))
    g_w_out = np.empty(w_out.shape)
    g_b_out = np.empty((depth, 2 * d))
    g_x = g_u.reshape(s, d).copy()
    for li in range(depth - 1, -1, -1):
        xi, h, e = xs[li], hs[li], es[li]
        wi = _masked(w_in[li], m_in[li])
        wo = _masked(w_out[li], m_out[li])
        gy = _flip_cols(g_x) if rev[li] else g_x
        g_out = np.empty((s, 2 * d))
        g_out[:, :d] = gy
        g_out[:, d:] = gy * xi * e + g_ld
        g_pre = (g_out @ wo) * (1.0 - h * h)
        gx_i = gy * e + g_pre @ wi
        _store_masked(g_w_in, li, g_pre.T @ xi, m_in[li])
        _store_colsum(g_b_in, li, g_pre)
        _store_masked(g_w_out, li, g_out.T @ h, m_out[li])
        _store_colsum(g_b_out, li, g_out)
        g_x = _flip_cols(gx_i) if rev[li] else gx_i
    g_u0 = g_x.reshape(s, r, c)

    for i in range(s):
        g_mean += g_u0[i]
        g_sigma += g_u0[i] * eps_u[i]
    g_log_sigma = g_sigma * sig_raw * (sig_raw <= max_sd)
    return g_tra, g_tca, g_trb, g_tcb, g_mean, g_log_sigma, g_w_in, g_b_in, g_w_out, g_b_out, g_lam


@dataclass
class LayerMeta:
    """Static per-layer data for the kernels."""

    max_sd_u: float
    sigma_half_a: float
    sigma_half_b: float
    mask_in: np.ndarray  # (L, hidden, d)
    mask_out: np.ndarray  # (L, 2d, hidden)
    reverse: np.ndarray  # (L,) bool


_ROW = (True, False, True, False)  # factor order: row_a, col_a, row_b, col_b


def _stack(arrays, empty_shape):
    if len(arrays) == 1:
        return arrays[0][None]
    return np.stack(arrays) if arrays else np.zeros(empty_shape)


class FusedAdapterDraw(torch.autograd.Function):
    @staticmethod
    def forward(ctx, meta: LayerMeta, eps_u, eps_a, eps_b, depth: int, *params):
        arr = [t.detach().numpy() for t in params]
        zs, raws = arr[0:8:2], arr[1:8:2]
        mean, log_sigma, lam = arr[8], arr[9], float(arr[-1])
        fl = arr[10:-1]
        w_in = _stack(fl[0::4], (0, 1, 1))
        b_in = _stack(fl[1::4], (0, 1))
        w_out = _stack(fl[2::4], (0, 1, 1))
        b_out = _stack(fl[3::4], (0, 1))

        factors = []
        for idx, (z, raw) in enumerate(zip(zs, raws)):
            d, l, t, info = _factor_forward(z, raw, 0.0)
            if info:
                # same policy as the composed path: one jittered retry, then an error
                logger.warning("cholesky failed at pivot %d; retrying with jitter %.1e", info - 1, JITTER)
                d, l, t, info = _factor_forward(z, raw, JITTER)
                if info:
                    raise DecompositionError(f"matrix is not positive definite (pivot {info - 1})", info - 1)
            factors.append((d, l, t))
        ts = [np.ascontiguousarray(f[2].T) if row else f[2] for f, row in zip(factors, _ROW)]

        nu, na, nb = eps_u.numpy(), eps_a.numpy(), eps_b.numpy()
        out = _draw_forward(*ts, mean, log_sigma, w_in, b_in, w_out, b_out, meta.mask_in, meta.mask_out,
                            meta.reverse, lam, meta.max_sd_u, meta.sigma_half_a, meta.sigma_half_b, nu, na, nb)
        a, b, kl, se, u, u0, logdet, sigma, sig_raw, xs, hs, es, p_a, q_a, p_b, q_b, status, aux = out
        if status == FLOW_NONFINITE:
            raise NumericError("flow produced non-finite output")
        if status == KL_NONFINITE:
            raise NumericError(f"non-finite KL contribution at sample {aux}")

        ctx.meta, ctx.depth = meta, depth
        ctx.saved = (zs, raws, factors, ts, mean, w_in, w_out, nu, na, nb, u, sigma, sig_raw, xs, hs, es,
                     p_a, q_a, p_b, q_b)
        extra = [torch.from_numpy(np.asarray(se)), torch.from_numpy(u), torch.from_numpy(u0),
                 torch.from_numpy(logdet)]
        ctx.mark_non_differentiable(*extra)
        return torch.from_numpy(a), torch.from_numpy(b), torch.from_numpy(np.asarray(kl)), *extra

    @staticmethod
    def backward(ctx, g_a, g_b, g_kl, *_):
        meta = ctx.meta
        (zs, raws, factors, ts, mean, w_in, w_out, nu, na, nb, u, sigma, sig_raw, xs, hs, es,
         p_a, q_a, p_b, q_b) = ctx.saved
        ga = np.zeros((nu.shape[0],) + na.shape[1:]) if g_a is None else np.ascontiguousarray(g_a.numpy())
        gb = np.zeros((nu.shape[0],) + nb.shape[1:]) if g_b is None else np.ascontiguousarray(g_b.numpy())
        gkl = 0.0 if g_kl is None else float(g_kl)
        (g_tra, g_tca, g_trb, g_tcb, g_mean, g_log_sigma, g_w_in, g_b_in, g_w_out, g_b_out,
         g_lam) = _draw_backward(*ts, mean, w_in, w_out, meta.mask_in, meta.mask_out, meta.reverse,
                                 meta.max_sd_u, meta.sigma_half_a, meta.sigma_half_b, nu, na, nb, u, sigma,
                                 sig_raw, xs, hs, es, p_a, q_a, p_b, q_b, ga, gb, gkl)
        grads = []
        for (d, l, t), z, raw, g, row in zip(factors, zs, raws, (g_tra, g_tca, g_trb, g_tcb), _ROW):
            grads.extend(_factor_backward(l, t, z, d, raw, np.ascontiguousarray(g.T) if row else g))
        grads += [g_mean, g_log_sigma]
        for li in range(ctx.depth):
            grads += [g_w_in[li], g_b_in[li], g_w_out[li], g_b_out[li]]
        grads.append(np.asarray(g_lam))
        return (None, None, None, None, None, *(torch.from_numpy(g) for g in grads))


def layer_meta(layer) -> LayerMeta:
    fl = list(layer.flow.layers)
    d = layer.inducing_rows * layer.inducing_cols
    return LayerMeta(
        max_sd_u=layer.posterior.max_sd_u,
        sigma_half_a=layer.sigma_half_a,
        sigma_half_b=layer.sigma_half_b,
        mask_in=_stack([f.mask_in.numpy() for f in fl], (0, 1, 1)) if fl else np.zeros((0, 1, d)),
        mask_out=_stack([f.mask_out.numpy() for f in fl], (0, 1, 1)) if fl else np.zeros((0, 2 * d, 1)),
        reverse=np.array([f.reverse for f in fl], dtype=np.bool_),
    )


def fused_params(layer) -> List[torch.Tensor]:
    out = []
    for f in (layer.row_a, layer.col_a, layer.row_b, layer.col_b):
        out += [f.z, f.d_raw]
    out += [layer.posterior.mean, layer.posterior.log_sigma]
    for fl in layer.flow.layers:
        out += [fl.w_in, fl.b_in, fl.w_out, fl.b_out]
    out.append(layer.noise_scale())
    return out
