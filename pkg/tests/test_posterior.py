import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from bayeslora.flow import FlowStack
from bayeslora.posterior import (
    InducingPosterior,
    conditional_kl,
    gaussian_kl,
    matrix_normal_logdensity,
    mc_flow_kl,
    standard_normal_logdensity,
    whitened_kl,
    whitened_kl_terms,
)
from bayeslora.kron import vec
from bayeslora.numeric import NumericError, ParameterError

from conftest import random_spd


def _posterior(mean, sigma, max_sd=10.0):
    rows, cols = mean.shape
    post = InducingPosterior(rows, cols, max_sd_u=max_sd)
    with torch.no_grad():
        post.mean.copy_(mean)
        post.log_sigma.copy_(torch.log(sigma))
    return post


def affine_flow(scale: float, shift: float) -> FlowStack:
    """One-coordinate flow ``u -> scale * u + shift``."""
    flow = FlowStack(1, depth=1)
    with torch.no_grad():
        flow.layers[0].b_out.copy_(torch.tensor([shift, math.log(scale)]))
    return flow


def test_gaussian_kl_cases():
    assert float(gaussian_kl(torch.zeros(3), torch.ones(3), torch.zeros(3), torch.eye(3))) == 0.0
    val = gaussian_kl(torch.tensor([1.0, 0.0]), torch.ones(2), torch.zeros(2), torch.eye(2))
    assert float(val) == pytest.approx(0.5, abs=1e-15)


def test_gaussian_kl_matches_monte_carlo():
    g = torch.Generator().manual_seed(3)
    m_q, s_q = torch.randn(3, generator=g), torch.rand(3, generator=g) + 0.3
    m_p, k_p = torch.randn(3, generator=g), random_spd(3, g)
    exact = float(gaussian_kl(m_q, s_q, m_p, k_p))
    n = 1_000_000
    x = m_q + s_q.sqrt() * torch.randn(n, 3, generator=g)
    q = torch.distributions.MultivariateNormal(m_q, torch.diag(s_q))
    p = torch.distributions.MultivariateNormal(m_p, k_p)
    terms = q.log_prob(x) - p.log_prob(x)
    se = float(terms.std() / math.sqrt(n))
    assert abs(float(terms.mean()) - exact) < 3 * se


@given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 6))
def test_gaussian_kl_nonnegative_and_zero_at_match(seed, d):
    g = torch.Generator().manual_seed(seed)
    m, s = torch.randn(d, generator=g), torch.rand(d, generator=g) + 0.1
    assert float(gaussian_kl(m, s, torch.randn(d, generator=g), random_spd(d, g))) >= 0
    assert abs(float(gaussian_kl(m, s, m, torch.diag(s)))) < 1e-12


def test_whitened_kl_cases():
    assert float(whitened_kl(_posterior(torch.zeros(2, 2), torch.ones(2, 2)))) == 0.0
    val = whitened_kl(_posterior(torch.zeros(2, 2), torch.full((2, 2), 0.5)))
    assert float(val) == pytest.approx(4 * 0.5 * (0.25 - 1 - 2 * math.log(0.5)), abs=1e-14)
    assert float(val) == pytest.approx(1.2726, abs=1e-4)


def test_whitened_kl_requires_whitened():
    post = InducingPosterior(2, 2, whitened=False)
    with pytest.raises(ParameterError):
        whitened_kl(post)


def test_sigma_clamped_at_max():
    post = _posterior(torch.zeros(1, 2), torch.tensor([[0.05, 3.0]]), max_sd=0.1)
    assert torch.allclose(post.sigma, torch.tensor([[0.05, 0.1]]), rtol=0, atol=1e-15)


def test_conditional_kl_cases():
    assert conditional_kl(1.0, 17) == 0.0
    assert conditional_kl(0.5, 4) == pytest.approx(1.2726, abs=1e-4)
    assert conditional_kl(2.0, 2) == pytest.approx(1.6137, abs=1e-4)
    for bad in (0.0, -1.0):
        with pytest.raises(ParameterError):
            conditional_kl(bad, 3)
    with pytest.raises(ParameterError):
        conditional_kl(torch.tensor(0.0), 3)


def test_conditional_kl_convex_with_unique_minimum():
    lams = np.round(np.arange(0.1, 3.0001, 0.1), 10)
    vals = np.array([conditional_kl(float(l), 5) for l in lams])
    assert np.all(vals >= 0)
    assert vals.argmin() == int(np.flatnonzero(np.isclose(lams, 1.0))[0])
    assert np.all(np.diff(vals, 2) > 0)


def test_mc_kl_identity_flow_matches_closed_form():
    g = torch.Generator().manual_seed(0)
    post = _posterior(0.3 * torch.randn(2, 3, generator=g), 0.2 + torch.rand(2, 3, generator=g))
    kl, se = mc_flow_kl(post, FlowStack(6, depth=0), standard_normal_logdensity, 100_000, g)
    assert abs(float(kl - whitened_kl(post))) < 3 * float(se)


def test_mc_kl_vanishes_when_q_is_prior():
    g = torch.Generator().manual_seed(1)
    post = _posterior(torch.zeros(2, 2), torch.ones(2, 2))
    kl, se = mc_flow_kl(post, None, standard_normal_logdensity, 10_000, g)
    assert abs(float(kl)) <= 3 * float(se) + 1e-15


def test_mc_kl_affine_flow():
    g = torch.Generator().manual_seed(2)
    post = _posterior(torch.zeros(1, 1), torch.ones(1, 1))
    kl, se = mc_flow_kl(post, affine_flow(2.0, 1.0), standard_normal_logdensity, 100_000, g)
    exact = 0.5 * (4 + 1 - 1 - math.log(4))
    assert exact == pytest.approx(1.3069, abs=1e-4)
    assert abs(float(kl) - exact) < 3 * float(se)


def test_mc_kl_names_bad_sample():
    post = _posterior(torch.zeros(1, 1), torch.ones(1, 1))

    def bad_prior(u):
        out = standard_normal_logdensity(u).clone()
        out[2] = float("nan")
        return out

    with pytest.raises(NumericError, match="sample 2"):
        mc_flow_kl(post, None, bad_prior, 5, torch.Generator().manual_seed(0))


def test_matrix_normal_logdensity_matches_dense():
    g = torch.Generator().manual_seed(4)
    k_r, k_c = random_spd(2, g), random_spd(3, g)
    u = torch.randn(5, 2, 3, generator=g)
    dense = torch.distributions.MultivariateNormal(torch.zeros(6), torch.kron(k_c, k_r))
    expected = dense.log_prob(torch.stack([vec(x) for x in u]))
    assert torch.allclose(matrix_normal_logdensity(k_r, k_c)(u), expected, atol=1e-12)
