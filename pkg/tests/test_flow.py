import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import integrate

from bayeslora.flow import FlowStack, density_under_flow, forward_with_logdet, inverse_with_logdet, made_masks
from bayeslora.numeric import DimensionError, NumericError
from bayeslora.posterior import standard_normal_logdensity


def randomize(flow: FlowStack, seed: int, scale: float = 0.3) -> FlowStack:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in flow.layers:
            for p in (layer.w_in, layer.b_in, layer.w_out, layer.b_out):
                p.copy_(scale * torch.randn(p.shape, generator=g))
    return flow


def numeric_jacobian(fn, x: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    d = x.numel()
    jac = torch.zeros(d, d)
    for i in range(d):
        e = torch.zeros(d)
        e[i] = step
        jac[:, i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return jac


def test_depth_zero_is_identity():
    u0 = torch.randn(3, 2, 4)
    u, ld = forward_with_logdet(FlowStack(8, depth=0), u0)
    assert torch.equal(u, u0) and torch.equal(ld, torch.zeros(3))
    u, ld = forward_with_logdet(None, u0)
    assert torch.equal(u, u0)


def test_new_flow_starts_as_identity():
    flow = FlowStack(6, depth=2, generator=torch.Generator().manual_seed(0))
    x = torch.randn(4, 6)
    y, ld = flow(x)
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_constant_scale_logdet():
    flow = FlowStack(4, depth=1)
    with torch.no_grad():
        flow.layers[0].b_out[4:] = 1.0  # log-scale 1, i.e. scale e
    y, ld = flow(torch.randn(4))
    assert float(ld) == pytest.approx(4.0, abs=1e-14)


def test_masks_are_autoregressive():
    d = 5
    m_in, m_out = made_masks(d, 2 * d)
    conn = (m_out @ m_in)  # output <- input connectivity
    for out_block in (conn[:d], conn[d:]):
        assert torch.all(torch.triu(out_block) == 0)


@given(d=st.integers(1, 6), depth=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_logdet_matches_numeric_jacobian(d, depth, seed):
    flow = randomize(FlowStack(d, depth=depth), seed)
    x = torch.randn(d, generator=torch.Generator().manual_seed(seed))
    _, ld = flow(x)
    jac = numeric_jacobian(lambda v: flow(v)[0].detach(), x)
    _, logabs = torch.linalg.slogdet(jac)
    assert abs(float(ld) - float(logabs)) <= 1e-4 * max(1.0, abs(float(logabs)))
    assert torch.allclose(torch.triu(jac if depth == 1 and True else torch.zeros(d, d), 1),
                          torch.zeros(d, d), atol=1e-8) or depth > 1


@pytest.mark.parametrize("depth", [1, 2, 4])
@pytest.mark.parametrize("d", [1, 9, 81])
def test_inverse_round_trip(depth, d):
    flow = randomize(FlowStack(d, depth=depth), seed=d + depth, scale=0.05 if d == 81 else 0.3)
    x = torch.randn(3, d, generator=torch.Generator().manual_seed(0))
    y, ld = flow(x)
    x_back, ld_back = flow.inverse(y)
    assert torch.allclose(x_back, x, atol=1e-8)
    assert torch.allclose(ld_back, ld, atol=1e-8)


def test_density_cases():
    u = torch.randn(2, 2, 3)
    assert torch.equal(density_under_flow(None, standard_normal_logdensity, u), standard_normal_logdensity(u))
    flow = FlowStack(1, depth=1)
    with torch.no_grad():
        flow.layers[0].b_out.copy_(torch.tensor([1.0, math.log(2.0)]))
    val = density_under_flow(flow, standard_normal_logdensity, torch.ones(1, 1))
    assert float(val) == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(2), abs=1e-14)
    assert float(val) == pytest.approx(-1.612, abs=1e-3)


def test_density_round_trip():
    flow = randomize(FlowStack(6, depth=2), seed=3)
    u0 = torch.randn(5, 2, 3)
    u, ld = forward_with_logdet(flow, u0)
    dens = density_under_flow(flow, standard_normal_logdensity, u)
    assert torch.allclose(dens, standard_normal_logdensity(u0) - ld, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_one_dimensional_density_integrates_to_one(seed):
    flow = randomize(FlowStack(1, depth=1), seed, scale=0.5)

    def pdf(v):
        u = torch.tensor([[[v]]])
        with torch.no_grad():
            return math.exp(float(density_under_flow(flow, standard_normal_logdensity, u)))

    total, _ = integrate.quad(pdf, -10, 10, limit=200, epsabs=1e-10)
    assert abs(total - 1) < 1e-3


def test_non_finite_output_raises():
    flow = FlowStack(2, depth=1)
    with torch.no_grad():
        flow.layers[0].b_out[2:] = 1e4
    with pytest.raises(NumericError):
        flow(torch.ones(2))


def test_wrong_width_raises():
    with pytest.raises(DimensionError):
        FlowStack(4, depth=1)(torch.zeros(3))


def test_logdet_gradients_match_finite_differences():
    from bayeslora.numeric import finite_difference_grad

    flow = randomize(FlowStack(3, depth=2), seed=9)
    x = torch.randn(4, 3, generator=torch.Generator().manual_seed(1))
    params = [p for p in flow.parameters()]

    def f():
        return flow(x)[1].sum()

    analytic = torch.autograd.grad(f(), params)
    numeric = finite_difference_grad(f, params)
    for a, n in zip(analytic, numeric):
        assert torch.linalg.norm(a - n) <= 1e-4 * max(torch.linalg.norm(n), 1e-8)
