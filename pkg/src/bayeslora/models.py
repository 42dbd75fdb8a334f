"""Desk-scale base models whose linear layers can be swapped for adapters."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layer import AdapterDraw, BayesLoraLayer, LoraLayer, NoiseScale
from .numeric import DTYPE

ADAPTED_LAYERS = {"mlp": ("fc1", "head"), "attention": ("q_proj", "k_proj", "lm_head")}


@dataclass
class MethodSpec:
    """Which adapter to attach and how it is configured (defaults: Tables 9-10 at toy scale)."""

    kind: str = "bayes_lora"  # map_lora | bayes_lora | degenerate
    rank: int = 8
    alpha: float = 16.0
    inducing_rows: int = 9
    inducing_cols: int = 9
    flow_depth: int = 1
    samples: int = 4
    init_lambda: float = 1e-3
    max_lambda: float = 0.03
    learn_lambda: bool = True
    max_sd_u: float = 0.1
    init_sd_u: Optional[float] = None
    init_mean_sd: float = 1e-2
    prior_sd: float = 0.1
    sqrt_width_scaling: bool = True
    whitened: bool = True
    cache_cholesky: bool = True
    fused: bool = True

    def __post_init__(self):
        if self.kind not in ("map_lora", "bayes_lora", "degenerate"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "degenerate":
            # sigma_U <= 1e-6 so the bilinear limit holds; lambda pinned at 1e-4, no flow
            self.max_sd_u = min(self.max_sd_u, 1e-6)
            self.init_lambda = self.max_lambda = 1e-4
            self.learn_lambda = False
            self.flow_depth = 0

    @property
    def bayesian(self) -> bool:
        return self.kind != "map_lora"

    @property
    def label(self) -> str:
        if self.kind == "map_lora":
            return "map_lora"
        if self.kind == "degenerate":
            return "degenerate"
        return f"bayes_lora(L={self.flow_depth},r={self.inducing_rows},S={self.samples})"

    def as_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "MethodSpec":
        return replace(self, **kw)


def _linear(d_in: int, d_out: int, g: torch.Generator) -> nn.Linear:
    lin = nn.Linear(d_in, d_out).to(DTYPE)
    bound = 1.0 / math.sqrt(d_in)
    with torch.no_grad():
        lin.weight.copy_((torch.rand(d_out, d_in, dtype=DTYPE, generator=g) * 2 - 1) * bound)
        lin.bias.copy_((torch.rand(d_out, dtype=DTYPE, generator=g) * 2 - 1) * bound)
    return lin


class ToyModel(nn.Module):
    """Two-layer perceptron classifier or a single causal attention block.

    ``forward`` returns logits with a leading Monte Carlo axis: ``(S, N, K)``
    for the perceptron, ``(S, N, T, V)`` for the attention block. Layers
    without a stochastic adapter produce a singleton sample axis that
    broadcasts.
    """

    def __init__(self, arch: str = "mlp", input_dim: int = 16, hidden: int = 32, n_classes: int = 4,
                 vocab: int = 8, d_model: int = 16, seq_len: int = 12, seed_generator: Optional[torch.Generator] = None):
        super().__init__()
        g = seed_generator if seed_generator is not None else torch.Generator().manual_seed(0)
        self.arch = arch
        self.config = dict(arch=arch, input_dim=input_dim, hidden=hidden, n_classes=n_classes, vocab=vocab,
                           d_model=d_model, seq_len=seq_len)
        if arch == "mlp":
            self.base = nn.ModuleDict({"fc1": _linear(input_dim, hidden, g), "head": _linear(hidden, n_classes, g)})
            self.n_out = n_classes
        elif arch == "attention":
            self.embed = nn.Parameter(torch.randn(vocab, d_model, dtype=DTYPE, generator=g) * 0.5)
            self.pos = nn.Parameter(torch.randn(seq_len, d_model, dtype=DTYPE, generator=g) * 0.1)
            self.base = nn.ModuleDict({n: _linear(d_model, d_model, g) for n in ("q_proj", "k_proj", "v_proj")})
            self.base["lm_head"] = _linear(d_model, vocab, g)
            self.n_out = vocab
        else:
            raise ValueError(f"unknown architecture {arch!r}")
        self.adapters = nn.ModuleDict()
        self.noise_scale: Optional[NoiseScale] = None
        self.method: Optional[MethodSpec] = None

    # -- adapters -------------------------------------------------------------

    @property
    def layer_order(self) -> List[str]:
        return list(ADAPTED_LAYERS[self.arch])

    def freeze_base(self) -> None:
        for p in self.base.parameters():
            p.requires_grad_(False)
        if self.arch == "attention":
            self.embed.requires_grad_(False)
            self.pos.requires_grad_(False)

    def bayes_layers(self) -> Dict[str, BayesLoraLayer]:
        return {n: a for n, a in self.adapters.items() if isinstance(a, BayesLoraLayer)}

    def invalidate_caches(self) -> None:
        for a in self.bayes_layers().values():
            a.invalidate()

    def d_total(self) -> int:
        return sum(a.d_w for a in self.adapters.values())

    def draw(self, n_samples: int, generator: Optional[torch.Generator]) -> Dict[str, AdapterDraw]:
        # fixed layer order keeps the random stream consumption reproducible
        return {n: self.adapters[n].draw(n_samples, generator) for n in self.layer_order if n in self.adapters}

    def _lin(self, name: str, h: torch.Tensor, draws: Dict[str, AdapterDraw]) -> torch.Tensor:
        if name in self.adapters:
            return self.adapters[name].apply(h, draws[name])
        return self.base[name](h)

    def forward(self, x: torch.Tensor, n_samples: int = 1, generator: Optional[torch.Generator] = None,
                draws: Optional[Dict[str, AdapterDraw]] = None):
        if draws is None:
            draws = self.draw(n_samples, generator)
        if self.arch == "mlp":
            h = x.unsqueeze(0)
            h = torch.tanh(self._lin("fc1", h, draws))
            return self._lin("head", h, draws), draws
        t = x.shape[-1]
        e = (self.embed[x] + self.pos[:t]).unsqueeze(0)
        q = self._lin("q_proj", e, draws)
        k = self._lin("k_proj", e, draws)
        v = self._lin("v_proj", e, draws)
        scores = q @ k.transpose(-2, -1) / math.sqrt(e.shape[-1])
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        h = e + torch.softmax(scores, dim=-1) @ v
        return self._lin("lm_head", h, draws), draws


def adapt(base: ToyModel, method: MethodSpec, generator: Optional[torch.Generator] = None) -> ToyModel:
    """Copy ``base``, freeze it and wrap the architecture's target layers."""
    model = copy.deepcopy(base)
    model.freeze_base()
    model.method = method
    g = generator if generator is not None else torch.Generator().manual_seed(0)
    if method.bayesian:
        model.noise_scale = NoiseScale(method.init_lambda, method.max_lambda, method.learn_lambda)
    for name in model.layer_order:
        lin = model.base[name]
        if method.bayesian:
            ad = BayesLoraLayer(
                lin.weight, lin.bias, rank=method.rank, alpha=method.alpha, inducing_rows=method.inducing_rows,
                inducing_cols=method.inducing_cols, flow_depth=method.flow_depth, noise_scale=model.noise_scale,
                max_sd_u=method.max_sd_u, init_sd_u=method.init_sd_u, init_mean_sd=method.init_mean_sd,
                prior_sd=method.prior_sd, sqrt_width_scaling=method.sqrt_width_scaling, whitened=method.whitened,
                cache_cholesky=method.cache_cholesky, fused=method.fused, generator=g)
        else:
            ad = LoraLayer(lin.weight, lin.bias, rank=method.rank, alpha=method.alpha, generator=g)
        model.adapters[name] = ad
    return model


def trainable_parameters(model: nn.Module) -> Dict[str, nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model).values())


def analytic_param_count(layer_shapes, method: MethodSpec) -> int:
    """Closed-form trainable-parameter census for adapters on ``(d_out, d_in)`` layers."""
    r = method.rank
    if not method.bayesian:
        return sum(r * (d_out + d_in) for d_out, d_in in layer_shapes)
    ri, ci = method.inducing_rows, method.inducing_cols
    d = ri * ci
    hidden = 2 * d
    flow = method.flow_depth * (hidden * d + hidden + 2 * d * hidden + 2 * d)
    total = 0
    for d_out, d_in in layer_shapes:
        factors = (ri * r + ri) + (ci * d_in + ci) + (ri * d_out + ri) + (ci * r + ci)
        total += 2 * d + factors + flow
    lam = 1 if (method.learn_lambda and method.init_lambda < method.max_lambda) else 0
    return total + lam


def layer_shapes(model: ToyModel):
    return [tuple(model.base[n].weight.shape) for n in model.layer_order]


def _flat_targets_and_probs(logits: torch.Tensor) -> torch.Tensor:
    probs = torch.softmax(logits, dim=-1).mean(dim=0)
    return probs.reshape(-1, probs.shape[-1])


@torch.no_grad()
def predict_proba(model: ToyModel, x: torch.Tensor, n_samples: int, seed: int = 0,
                  batch_size: int = 512) -> np.ndarray:
    """Predictive distribution: mean of per-sample softmax outputs, one item per row."""
    g = torch.Generator().manual_seed(seed)
    draws = model.draw(n_samples, g)
    out = []
    for i in range(0, x.shape[0], batch_size):
        logits, _ = model(x[i : i + batch_size], draws=draws)
        out.append(_flat_targets_and_probs(logits))
    return torch.cat(out).numpy()


@torch.no_grad()
def predict_proba_sequential(model: ToyModel, x: torch.Tensor, n_samples: int, seed: int = 0,
                             batch_size: int = 512) -> np.ndarray:
    """Same predictive average, one full forward pass per sample."""
    g = torch.Generator().manual_seed(seed)
    total = None
    for _ in range(n_samples):
        draws = model.draw(1, g)
        parts = []
        for i in range(0, x.shape[0], batch_size):
            logits, _ = model(x[i : i + batch_size], draws=draws)
            parts.append(_flat_targets_and_probs(logits))
        p = torch.cat(parts)
        total = p if total is None else total + p
    return (total / n_samples).numpy()


def pretrain_base(model: ToyModel, x: torch.Tensor, y: torch.Tensor, seed: int = 0, epochs: int = 30,
                  lr: float = 1e-2, batch_size: int = 64) -> float:
    """Fit all base weights on a pretraining split, freeze them, return training accuracy."""
    params = [p for p in model.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    g = torch.Generator().manual_seed(seed)
    n = x.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            logits, _ = model(x[idx])
            loss = F.cross_entropy(logits[0].reshape(-1, model.n_out), y[idx].reshape(-1))
            if not torch.isfinite(loss):
                raise FloatingPointError("pretraining diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.freeze_base()
    with torch.no_grad():
        logits, _ = model(x)
        pred = logits[0].argmax(-1)
    return float((pred == y).double().mean())
