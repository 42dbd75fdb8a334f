import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bayeslora.hpo import (
    DEFAULT_BOUNDS,
    GpSurrogate,
    InfeasibleArchiveError,
    ParetoArchive,
    feasibility_probability,
    fit_gp,
    from_unit,
    gp_posterior,
    hv_improvement,
    hypervolume,
    hypervolume_with_flags,
    pareto_filter,
    prob_feasible,
    propose,
    qnehvi_acquire,
    reference_point,
    sample_joint,
    to_unit,
)
from bayeslora.numeric import ParameterError

from oracles import biobjective_problem, inclusion_exclusion_hypervolume, rejection_hypervolume


def unit_gp(x, y, noise=0.0):
    return GpSurrogate(np.atleast_2d(x), np.asarray(y, dtype=float), np.ones(np.atleast_2d(x).shape[1]),
                       noise_var=noise)


def test_gp_hand_case():
    mean, cov = gp_posterior(unit_gp([[0.0]], [1.0]), [[1.0]])
    assert mean[0] == pytest.approx(math.exp(-0.5), abs=1e-14)
    assert cov[0, 0] == pytest.approx(1 - math.exp(-1), abs=1e-14)
    assert mean[0] == pytest.approx(0.6065, abs=1e-4) and cov[0, 0] == pytest.approx(0.6321, abs=1e-4)


def test_fitted_noise_free_gp_interpolates():
    rng = np.random.default_rng(0)
    x = rng.random((8, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    gp = fit_gp(x, y, noise_var=0.0, rng=rng)
    mean, cov = gp_posterior(gp, x)
    assert np.abs(mean - y).max() < 1e-8
    assert np.abs(np.diag(cov)).max() < 1e-8


def test_noisy_gp_variance_floor_at_training_inputs():
    x = np.array([[0.0], [0.5], [1.0]])
    gp = unit_gp(x, [0.1, -0.2, 0.3], noise=0.04)
    _, cov = gp_posterior(gp, x, observation_noise=True)
    assert np.all(np.diag(cov) >= 0.04)
    with pytest.raises(ParameterError):
        gp_posterior(gp, [[0.0, 1.0]])


def test_fit_gp_predicts_held_out_points():
    rng = np.random.default_rng(1)
    x = rng.random((25, 2))
    f = lambda v: np.sin(4 * v[:, 0]) * np.cos(2 * v[:, 1])
    gp = fit_gp(x, f(x), rng=rng)
    xq = rng.random((50, 2))
    mean, _ = gp_posterior(gp, xq)
    assert np.sqrt(np.mean((mean - f(xq)) ** 2)) < 0.1


def test_reparameterized_samples_match_posterior_moments():
    gp = unit_gp([[0.0], [1.0]], [1.0, -1.0], noise=0.01)
    mean, cov = gp_posterior(gp, [[0.3], [0.5], [2.0]])
    n = 100_000
    s = sample_joint(mean, cov, n, np.random.default_rng(0))
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(s.mean(0) - mean) < 3 * se_mean)
    emp = np.cov(s.T)
    # var of a sample covariance entry: (c_ii c_jj + c_ij^2) / n
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
    assert np.all(np.abs(emp - cov) < 3 * se_cov + 1e-12)


def test_feasibility_probability_cases():
    assert feasibility_probability(0.0, 1.0) == 0.5
    assert float(feasibility_probability(-2.0, 1.0)) == pytest.approx(0.9772, abs=1e-4)
    assert feasibility_probability([0.0, -1.0, 1.0], [0.0, 0.0, 0.0]).tolist() == [0.5, 1.0, 0.0]
    far = [[50.0]]
    two = [unit_gp([[0.0]], [3.0]), unit_gp([[0.0]], [-3.0])]
    assert prob_feasible(two, far) == pytest.approx(0.25, abs=1e-12)


def test_pareto_filter_cases():
    assert pareto_filter([(1, 2), (2, 1), (2, 2)]) == [0, 1]
    assert pareto_filter([(3, 3)]) == [0]
    assert pareto_filter([(1, 1), (1, 1), (2, 2)]) == [0, 1]
    assert pareto_filter(np.zeros((0, 2))) == []


@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), d=st.integers(2, 3))
def test_pareto_output_is_dominance_free(seed, n, d):
    p = np.random.default_rng(seed).integers(0, 4, size=(n, d)).astype(float)
    keep = pareto_filter(p)
    assert pareto_filter(p[keep]) == list(range(len(keep)))


def test_hypervolume_cases():
    assert hypervolume([(1, 2), (2, 1)], (0, 0)) == 3.0
    assert hypervolume([(1, 1, 1)], (0, 0, 0)) == 1.0
    assert hypervolume([(1, 2), (2, 1), (0.5, 0.5)], (0, 0)) == 3.0
    hv, flags = hypervolume_with_flags([(1, 2), (-1, 3)], (0, 0))
    assert hv == 2.0 and flags.tolist() == [False, True]


@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), d=st.integers(1, 3))
def test_hypervolume_matches_inclusion_exclusion(seed, n, d):
    rng = np.random.default_rng(seed)
    p = rng.random((n, d)) + 0.01
    ref = np.zeros(d)
    exact = inclusion_exclusion_hypervolume(p, ref)
    assert abs(hypervolume(p, ref) - exact) < 1e-12
    assert abs(hypervolume(p[rng.permutation(n)], ref) - exact) < 1e-12
    assert hypervolume(np.vstack([p, rng.random((1, d))]), ref) >= exact - 1e-12


def test_hypervolume_against_rejection_sampling():
    rng = np.random.default_rng(0)
    hv, se = rejection_hypervolume([(1, 2), (2, 1)], (0, 0), 1_000_000, rng)
    assert abs(hv - 3) / 3 < 0.01


@given(seed=st.integers(0, 10_000), n=st.integers(0, 5), d=st.integers(2, 3))
def test_hv_improvement_is_difference_of_volumes(seed, n, d):
    rng = np.random.default_rng(seed)
    front = rng.random((n, d))
    cands = rng.random((4, d)) * 1.2
    ref = np.zeros(d)
    base = hypervolume(front, ref) if n else 0.0
    expected = [hypervolume(np.vstack([front, c]), ref) - base for c in cands]
    assert np.allclose(hv_improvement(front, cands, ref), expected, atol=1e-12)


def test_reference_point_cases():
    assert np.allclose(reference_point([(1, 1), (2, 3)], 0.1), [0.9, 0.9])
    assert reference_point([(1, 1), (2, 3)]).tolist() == [1.0, 1.0]
    with pytest.raises(InfeasibleArchiveError):
        reference_point(np.zeros((0, 2)))


def _known_posterior_setup():
    """Two objectives with independent GPs, a noise-free archive point at 0 and one candidate."""
    hist = np.array([[0.0]])
    f1, f2 = unit_gp(hist, [0.0]), unit_gp(hist, [0.0])
    cand = np.array([[0.8]])
    ref = np.array([-1.5, -1.5])  # maximization orientation
    return f1, f2, hist, cand, ref


def test_acquisition_zero_at_known_archive_point():
    f1, f2, hist, _, ref = _known_posterior_setup()
    val = qnehvi_acquire([f1, f2], [], hist, np.array([True]), hist, 16, np.random.default_rng(0), ref)
    assert val.tolist() == [0.0]


def test_acquisition_matches_quadrature():
    f1, f2, hist, cand, ref = _known_posterior_setup()
    (m1,), c1 = gp_posterior(f1, cand)
    (m2,), c2 = gp_posterior(f2, cand)
    s1, s2 = math.sqrt(c1[0, 0]), math.sqrt(c2[0, 0])
    # improvement of y = -f over the single front point p = (0, 0), as a function of the objective draw
    g1 = np.linspace(m1 - 8 * s1, m1 + 8 * s1, 1601)
    g2 = np.linspace(m2 - 8 * s2, m2 + 8 * s2, 1601)
    y1, y2 = np.meshgrid(-g1, -g2, indexing="ij")
    box = np.clip(y1 - ref[0], 0, None) * np.clip(y2 - ref[1], 0, None)
    inner = np.clip(np.minimum(y1, 0) - ref[0], 0, None) * np.clip(np.minimum(y2, 0) - ref[1], 0, None)
    dens = np.exp(-0.5 * ((g1[:, None] - m1) / s1) ** 2 - 0.5 * ((g2[None, :] - m2) / s2) ** 2) / (2 * math.pi * s1 * s2)
    expected = np.trapezoid(np.trapezoid((box - inner) * dens, g2, axis=1), g1)
    val = qnehvi_acquire([f1, f2], [], hist, np.array([True]), cand, 40_000, np.random.default_rng(1), ref)
    assert abs(val[0] - expected) / expected < 0.02


def test_acquisition_is_seeded_and_weighted_by_feasibility():
    f1, f2, hist, cand, ref = _known_posterior_setup()
    cands = np.array([[0.5], [1.0], [2.0]])
    a = qnehvi_acquire([f1, f2], [], hist, np.array([True]), cands, 64, np.random.default_rng(3), ref)
    b = qnehvi_acquire([f1, f2], [], hist, np.array([True]), cands, 64, np.random.default_rng(3), ref)
    assert np.array_equal(a, b) and np.all(a >= 0)
    con = unit_gp(hist, [0.0])  # mean 0 away from data: PoF 1/2
    far = np.array([[40.0]])
    c = qnehvi_acquire([f1, f2], [con], hist, np.array([True]), far, 64, np.random.default_rng(3), ref)
    d = qnehvi_acquire([f1, f2], [], hist, np.array([True]), far, 64, np.random.default_rng(3), ref)
    assert c[0] == pytest.approx(0.5 * d[0])
    with pytest.raises(ParameterError):
        qnehvi_acquire([f1], [], hist, np.array([True]), cands, 0, np.random.default_rng(0), ref[:1])


def _archive(n=5, seed=0):
    rng = np.random.default_rng(seed)
    arch = ParetoArchive(("f1", "f2"))
    for u in rng.random((n, 2)):
        x = from_unit(u, DEFAULT_BOUNDS)
        f, c = biobjective_problem(x)
        arch.add(x, f, c)
    return arch


def test_propose_budget_one_and_bounds():
    arch = _archive()
    p = propose(arch, DEFAULT_BOUNDS, budget=1, rng=np.random.default_rng(0))
    from bayeslora.hpo import sobol_points

    assert np.allclose(p.unit, sobol_points(1, 2, np.random.default_rng(0))[0])
    for seed in range(3):
        q = propose(arch, DEFAULT_BOUNDS, budget=64, rng=np.random.default_rng(seed), t_samples=8)
        for k, (lo, hi) in DEFAULT_BOUNDS.items():
            assert lo <= q.x[k] <= hi
        assert not q.space_filling and q.acquisition >= 0
    with pytest.raises(ParameterError):
        propose(arch, budget=0)


def test_propose_space_fills_without_feasible_points():
    arch = ParetoArchive(("f1", "f2"))
    arch.add({"lr": 1e-4, "wd": 0.1}, (1.0, 1.0), (1.0,))
    p = propose(arch, DEFAULT_BOUNDS, budget=8)
    assert p.space_filling
    with pytest.raises(InfeasibleArchiveError):
        arch.reference_point()


def test_unit_mapping_round_trip():
    x = {"lr": 3e-4, "wd": 0.05}
    back = from_unit(to_unit(x, DEFAULT_BOUNDS), DEFAULT_BOUNDS)
    assert back["lr"] == pytest.approx(3e-4) and back["wd"] == pytest.approx(0.05)
    assert from_unit(np.zeros(2), DEFAULT_BOUNDS) == {"lr": 1e-5, "wd": 1e-2}


def test_archive_selection_and_reports():
    arch = ParetoArchive()
    arch.add({"lr": 1e-4, "wd": 0.1}, (0.05, 0.5, -0.80), (-1.0,))
    arch.add({"lr": 2e-4, "wd": 0.1}, (0.02, 0.7, -0.80), (-1.0,))
    arch.add({"lr": 3e-4, "wd": 0.1}, (0.01, 0.4, -0.90), (0.5,))  # infeasible
    arch.add({"lr": 4e-4, "wd": 0.1}, (0.06, 0.6, -0.79), (-1.0,))  # dominated by the first
    assert arch.pareto_indices() == [0, 1]
    # both members sit at range-scaled distance 1 from utopia: lower NLL wins
    assert arch.select_operating_point() == 0
    lines = arch.pareto_csv().splitlines()
    assert lines[0] == "candidate,acc,nll,ece,lr,wd" and lines[1].startswith("0,0.8,0.5,0.05")
    assert arch.to_csv().splitlines()[0] == "lr,wd,ece,nll,neg_acc,c0,feasible,round"
    with pytest.raises(ParameterError):
        arch.add({"lr": 1e-4, "wd": 0.1}, (0.1, float("nan"), 0.0))
