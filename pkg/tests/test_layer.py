import copy

import pytest
import torch

from bayeslora.elbo import TrainConfig, elbo_step
from bayeslora.kron import vec
from bayeslora.layer import BayesLoraLayer, LoraLayer, NoiseScale, forward, merge_deterministic, sample_adapters
from bayeslora.models import MethodSpec, ToyModel, adapt
from bayeslora.numeric import DimensionError


def make_layer(d_out=6, d_in=5, seed=0, **kw):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(d_out, d_in, generator=g)
    kw.setdefault("inducing_rows", 3)
    kw.setdefault("inducing_cols", 4)
    return BayesLoraLayer(w, torch.randn(d_out, generator=g), rank=2, alpha=4.0, generator=g, **kw)


def perturb(module, seed=5, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_(scale * torch.randn(p.shape, generator=g))


def test_draw_shapes():
    layer = make_layer(flow_depth=1)
    d = layer.draw(7, torch.Generator().manual_seed(0))
    assert d.a.shape == (7, 2, 5) and d.b.shape == (7, 6, 2)
    assert d.u.shape == d.u0.shape == (7, 3, 4) and d.logdet.shape == (7,)
    assert layer.apply(torch.randn(10, 5), d).shape == (7, 10, 6)
    with pytest.raises(DimensionError):
        layer.apply(torch.randn(10, 4), d)
    with pytest.raises(ValueError):
        layer.draw(0, torch.Generator())


@pytest.mark.parametrize("fused", [True, False])
def test_same_seed_same_draw(fused):
    layer = make_layer(fused=fused)
    d1 = layer.draw(3, torch.Generator().manual_seed(11))
    d2 = layer.draw(3, torch.Generator().manual_seed(11))
    assert torch.equal(d1.a, d2.a) and torch.equal(d1.b, d2.b)


@pytest.mark.parametrize("depth", [0, 1, 2])
def test_fused_draw_matches_composed(depth):
    layer = make_layer(flow_depth=depth, fused=True)
    perturb(layer)
    ref = copy.deepcopy(layer)
    ref.fused = False
    d1 = layer.draw(4, torch.Generator().manual_seed(2))
    d2 = ref.draw(4, torch.Generator().manual_seed(2))
    for a, b in ((d1.a, d2.a), (d1.b, d2.b), (d1.u, d2.u), (d1.logdet, d2.logdet)):
        assert torch.allclose(a, b, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kw", [dict(flow_depth=1), dict(flow_depth=0),
                                dict(flow_depth=2, inducing_rows=4, inducing_cols=6), dict(kind="degenerate")])
def test_fused_elbo_values_and_gradients_match_composed(kw):
    kw = dict(kw)
    kind = kw.pop("kind", "bayes_lora")
    g = torch.Generator().manual_seed(0)
    base = ToyModel(input_dim=6, hidden=8, n_classes=3, seed_generator=g)
    m1 = adapt(base, MethodSpec(kind, fused=True, **kw), generator=torch.Generator().manual_seed(3))
    perturb(m1)
    m2 = copy.deepcopy(m1)
    for layer in m2.bayes_layers().values():
        layer.fused = False
    x, y = torch.randn(5, 6, generator=g), torch.randint(0, 3, (5,), generator=g)
    cfg = TrainConfig()
    bd1, g1 = elbo_step(m1, (x, y), cfg, torch.Generator().manual_seed(1), 0.01)
    bd2, g2 = elbo_step(m2, (x, y), cfg, torch.Generator().manual_seed(1), 0.01)
    assert bd1.elbo == pytest.approx(bd2.elbo, rel=1e-10, abs=1e-12)
    assert bd1.kl_u == pytest.approx(bd2.kl_u, rel=1e-10, abs=1e-12)
    assert set(g1) == set(g2)
    for k in g1:
        scale = max(float(g2[k].abs().max()), 1e-12)
        assert float((g1[k] - g2[k]).abs().max()) <= 1e-8 * scale, k


def test_factored_apply_matches_dense_kronecker():
    layer = make_layer(flow_depth=0)
    perturb(layer, scale=0.3)
    pa, pb = layer.projectors()
    u = torch.randn(3, 4, dtype=torch.float64)
    for pair in (pa, pb):
        dense = torch.kron(pair.t_col.T.contiguous(), pair.t_row) @ vec(u)
        assert torch.allclose(vec(pair.apply(u[None])[0]), dense, atol=1e-12)


def test_hand_two_by_two():
    layer = LoraLayer(torch.eye(2), rank=1, alpha=1.0)
    with torch.no_grad():
        layer.a.copy_(torch.tensor([[1.0, 0.0]]))
        layer.b.copy_(torch.tensor([[1.0], [0.0]]))
    out = layer.apply(torch.tensor([[1.0, 1.0]]), layer.draw(1))
    assert out.tolist() == [[[2.0, 1.0]]]
    assert torch.equal(merge_deterministic(layer), torch.tensor([[2.0, 0.0], [0.0, 1.0]]))


def test_lora_starts_at_pretrained_weights():
    w = torch.randn(4, 3)
    assert torch.equal(LoraLayer(w, rank=2).merge_deterministic(), w)


def test_column_forward_agrees_with_row_apply():
    layer = make_layer(flow_depth=1)
    g = torch.Generator().manual_seed(4)
    samples = sample_adapters(layer, 3, g)
    x = torch.randn(5, 9, dtype=torch.float64)
    cols = forward(layer, x, samples)
    d = layer.draw(3, torch.Generator().manual_seed(4))
    rows = layer.apply(x.T, d)
    for i in range(3):
        assert torch.allclose(cols[i].T, rows[i], atol=1e-12)
        w_eff = layer.w_pre + samples[i].delta_w
        assert torch.allclose(cols[i], w_eff @ x + layer.bias[:, None], atol=1e-12)


def test_merge_uses_mean_adapters():
    layer = make_layer(flow_depth=1)
    perturb(layer, scale=0.2)
    d = layer.mean_draw()
    expected = layer.w_pre + layer.scaling * d.b[0] @ d.a[0]
    assert torch.allclose(layer.merge_deterministic(), expected, atol=1e-14)


def test_degenerate_layer_is_nearly_deterministic():
    layer = make_layer(flow_depth=0, max_sd_u=1e-6, noise_scale=NoiseScale(1e-4, 1e-4, learn=False))
    perturb(layer, scale=0.3)
    with torch.no_grad():
        d = layer.draw(100, torch.Generator().manual_seed(0))
        w = layer.w_pre + layer.scaling * d.b @ d.a
        spread = float((w - w.mean(0)).abs().max())
        gap = float((w - layer.merge_deterministic()).abs().max())
    assert spread < 1e-3 and gap < 1e-3


def test_no_gradient_reaches_frozen_weights():
    layer = make_layer(flow_depth=1, fused=False)
    assert not layer.w_pre.requires_grad
    names = {n for n, _ in layer.named_parameters()}
    assert "w_pre" not in names and "bias" not in names
    d = layer.draw(2, torch.Generator().manual_seed(0))
    layer.apply(torch.randn(3, 5), d).sum().backward()
    assert layer.w_pre.grad is None
    assert layer.posterior.mean.grad is not None


def test_noise_scale_bounds():
    ns = NoiseScale(1e-3, 0.03)
    with torch.no_grad():
        ns.raw.fill_(50.0)
    assert 0 < float(ns()) <= 0.03
    with pytest.raises(ValueError):
        NoiseScale(0.05, 0.03)
    fixed = NoiseScale(1e-4, 1e-4, learn=True)
    assert not fixed.learn and float(fixed()) == 1e-4
