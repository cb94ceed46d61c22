import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqbench.core import DomainError, softmax
from uqbench.disentangle import (
    GaussianLogitLoss,
    GaussianLogitSamples,
    InsufficientSamplesError,
    ProbEnsemble,
    entropy,
    gl_aggregate,
    gl_head_loss,
    gl_nll,
    gl_predictive,
    gl_uncertainties,
    it_disentangle,
    sampled_softmax,
)


def scalar_it(probs):
    """Mutual-information split evaluated with plain loops."""
    t, c = len(probs), len(probs[0])
    mean = [sum(probs[i][k] for i in range(t)) / t for k in range(c)]
    total = -sum(p * math.log(p) for p in mean if p > 0)
    ale = sum(-sum(p * math.log(p) for p in row if p > 0) for row in probs) / t
    return total, ale, total - ale


def gh_expected_softmax(mu, var, nodes=80):
    """E[softmax(z)], z ~ N(mu, diag(var)), by tensor Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    c = len(mu)
    grids = np.meshgrid(*([x] * c), indexing="ij")
    z = np.stack([mu[k] + math.sqrt(var[k]) * grids[k] for k in range(c)], axis=-1)
    weight = np.ones_like(grids[0])
    for k in range(c):
        weight = weight * w.reshape([-1 if i == k else 1 for i in range(c)])
    return np.tensordot(weight, softmax(z), axes=(tuple(range(c)), tuple(range(c))))


def random_simplex(rng, shape):
    p = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    return p


# --- entropy / IT ----------------------------------------------------------


def test_entropy_edge_cases():
    assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
    with pytest.raises(DomainError):
        entropy(np.array([0.6, 0.6]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_it_matches_scalar_oracle(t, c, seed):
    probs = random_simplex(np.random.default_rng(seed), (t, c))
    u = it_disentangle(ProbEnsemble(probs))
    total, ale, epi = scalar_it(probs.tolist())
    assert float(u.total) == pytest.approx(total, abs=1e-10)
    assert float(u.aleatoric) == pytest.approx(ale, abs=1e-10)
    assert float(u.epistemic) == pytest.approx(epi, abs=1e-10)
    assert float(u.epistemic) >= -1e-9
    # additivity holds by construction: EU is defined as TU - AU
    assert float(u.epistemic) == float(u.total) - float(u.aleatoric)
    assert float(u.aleatoric) + float(u.epistemic) == pytest.approx(float(u.total), rel=1e-15, abs=1e-300)


def test_it_identical_passes_have_zero_epistemic():
    p = np.tile([[0.2, 0.3, 0.5]], (7, 1))
    u = it_disentangle(p)
    assert abs(float(u.epistemic)) < 1e-15
    assert float(u.aleatoric) == pytest.approx(float(u.total))


def test_it_disagreeing_one_hots_are_purely_epistemic():
    u = it_disentangle(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert float(u.aleatoric) == 0.0
    assert float(u.epistemic) == pytest.approx(math.log(2))


def test_it_vectorises_over_samples():
    rng = np.random.default_rng(0)
    probs = random_simplex(rng, (6, 11, 3))
    u = it_disentangle(probs)
    for i in range(11):
        total, ale, epi = scalar_it(probs[:, i].tolist())
        assert u.epistemic[i] == pytest.approx(epi, abs=1e-12)


def test_prob_ensemble_rejects_off_simplex():
    with pytest.raises(DomainError):
        ProbEnsemble(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        ProbEnsemble(np.array([0.5, 0.5]))


# --- GL aggregation / sampled softmax --------------------------------------


def test_gl_aggregate_moments():
    mu = np.array([[[1.0, 2.0]], [[3.0, 2.0]], [[2.0, 5.0]]])
    var = np.array([[[0.5, 1.0]], [[1.5, 1.0]], [[1.0, 4.0]]])
    agg = gl_aggregate(GaussianLogitSamples(mu, var))
    np.testing.assert_allclose(agg.mu_bar, [[2.0, 3.0]])
    np.testing.assert_allclose(agg.var_ale, [[1.0, 2.0]])
    np.testing.assert_allclose(agg.var_epi, [[2.0 / 3.0, 2.0]])


def test_gl_single_pass_has_no_epistemic_variance():
    s = GaussianLogitSamples(np.zeros((1, 4, 2)), np.ones((1, 4, 2)))
    with pytest.raises(InsufficientSamplesError):
        gl_aggregate(s).var_epi


def test_from_head_splits_and_floors():
    out = np.array([[[1.0, -2.0, -50.0, 0.0]]])
    s = GaussianLogitSamples.from_head(out)
    np.testing.assert_array_equal(s.mu, [[[1.0, -2.0]]])
    assert s.var[0, 0, 0] >= 1e-6
    assert s.var[0, 0, 1] == pytest.approx(math.log(2) + 1e-6)


def test_sampled_softmax_zero_variance_is_exact():
    mu = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(sampled_softmax(mu, np.zeros_like(mu), 10, np.random.default_rng(0)), softmax(mu))


def test_sampled_softmax_rejects_negative_variance():
    with pytest.raises(DomainError):
        sampled_softmax(np.zeros(2), np.array([1.0, -1.0]), 10, np.random.default_rng(0))


@pytest.mark.parametrize("c", [2, 3])
def test_sampled_softmax_matches_quadrature(c):
    rng = np.random.default_rng(c)
    for _ in range(4):
        mu = rng.normal(0, 2, c)
        var = rng.uniform(0.05, 3.0, c)
        est = sampled_softmax(mu, var, 200_000, np.random.default_rng(7))
        exact = gh_expected_softmax(mu, var, nodes=60 if c == 3 else 120)
        np.testing.assert_allclose(est, exact, atol=5e-3)


def test_sampled_softmax_chunking_does_not_change_values():
    mu = np.random.default_rng(2).normal(size=(7, 3))
    var = np.full_like(mu, 0.7)
    a = sampled_softmax(mu, var, 300, np.random.default_rng(4))
    b = sampled_softmax(mu, var, 300, np.random.default_rng(4), chunk=10**9)
    np.testing.assert_allclose(a, b, rtol=0, atol=0.15)
    assert a.shape == mu.shape
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_gl_uncertainties_shapes_and_ordering():
    rng = np.random.default_rng(3)
    # passes agree: small epistemic, large aleatoric
    mu = np.tile(rng.normal(size=(1, 20, 3)), (10, 1, 1))
    s = GaussianLogitSamples(mu, np.full(mu.shape, 4.0))
    au, eu = gl_uncertainties(s, 500, rng)
    assert au.shape == eu.shape == (20,)
    assert np.all(au > eu)
    np.testing.assert_allclose(eu, entropy(softmax(mu[0])), atol=1e-12)


def test_gl_predictive_is_mean_softmax():
    mu = np.random.default_rng(0).normal(size=(4, 3, 2))
    s = GaussianLogitSamples(mu, np.ones_like(mu))
    np.testing.assert_allclose(gl_predictive(s), softmax(mu).mean(0))


# --- GL training loss --------------------------------------------------------


def test_gl_nll_gradient_with_fixed_draws():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(6, 3))
    var = rng.uniform(0.1, 2.0, (6, 3))
    labels = rng.integers(0, 3, 6)
    eps = rng.normal(size=(50, 6, 3))
    _, dmu, dvar = gl_nll(mu, var, labels, eps)
    h = 1e-6
    for idx in itertools.product(range(6), range(3)):
        e = np.zeros_like(mu)
        e[idx] = h
        fd_mu = (gl_nll(mu + e, var, labels, eps)[0] - gl_nll(mu - e, var, labels, eps)[0]) / (2 * h)
        fd_var = (gl_nll(mu, var + e, labels, eps)[0] - gl_nll(mu, var - e, labels, eps)[0]) / (2 * h)
        assert fd_mu == pytest.approx(dmu[idx], rel=1e-4, abs=1e-9)
        assert fd_var == pytest.approx(dvar[idx], rel=1e-4, abs=1e-9)


def test_gl_nll_zero_variance_is_cross_entropy():
    mu = np.array([[2.0, -1.0], [0.0, 0.5]])
    labels = np.array([0, 1])
    loss, dmu, dvar = gl_nll(mu, np.zeros_like(mu), labels, np.random.default_rng(0).normal(size=(5, 2, 2)))
    expect = -np.mean(np.log(softmax(mu)[[0, 1], labels]))
    assert loss == pytest.approx(expect)
    np.testing.assert_array_equal(dvar, 0.0)


def test_gl_nll_stacked_matches_per_slice():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(3, 4, 2))
    var = rng.uniform(0.1, 1, (3, 4, 2))
    labels = rng.integers(0, 2, (3, 4))
    eps = rng.normal(size=(9, 3, 4, 2))
    loss, dmu, dvar = gl_nll(mu, var, labels, eps)
    for k in range(3):
        lk, dk, vk = gl_nll(mu[k], var[k], labels[k], eps[:, k])
        assert loss[k] == pytest.approx(lk, rel=1e-13)
        np.testing.assert_allclose(dmu[k], dk, rtol=1e-12)
        np.testing.assert_allclose(dvar[k], vk, rtol=1e-12)


def test_gaussian_logit_loss_raw_gradient():
    # chain through softplus: compare against FD on the raw rho outputs
    rng = np.random.default_rng(1)
    out = rng.normal(size=(4, 4))
    labels = rng.integers(0, 2, 4)
    loss_fn = GaussianLogitLoss(16)
    _, g = loss_fn(out, labels, np.random.default_rng(3))
    h = 1e-6
    for idx in itertools.product(range(4), range(4)):
        e = np.zeros_like(out)
        e[idx] = h
        up = loss_fn(out + e, labels, np.random.default_rng(3))[0]
        down = loss_fn(out - e, labels, np.random.default_rng(3))[0]
        assert (up - down) / (2 * h) == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


def test_gaussian_logit_loss_needs_rng_and_valid_labels():
    with pytest.raises(ValueError):
        GaussianLogitLoss()(np.zeros((2, 4)), np.array([0, 1]), None)
    with pytest.raises(DomainError):
        GaussianLogitLoss()(np.zeros((2, 4)), np.array([0, 2]), np.random.default_rng(0))


def _exact_c2_loss(m, v, nodes=200):
    # exact -ln E[softmax(z)_0] for C=2 by quadrature on the logit difference
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    d = (m[0, 0] - m[0, 1]) + math.sqrt(v[0, 0] + v[0, 1]) * x
    return -math.log(float(w @ (1.0 / (1.0 + np.exp(-d)))))


def _exact_c2_grad(mu, var, h=1e-5):
    g = np.zeros((2, 2))
    for j in range(2):
        e = np.zeros_like(mu)
        e[0, j] = h
        g[0, j] = (_exact_c2_loss(mu + e, var) - _exact_c2_loss(mu - e, var)) / (2 * h)
        g[1, j] = (_exact_c2_loss(mu, var + e) - _exact_c2_loss(mu, var - e)) / (2 * h)
    return g


MU, VAR, LABEL = np.array([[0.7, -0.4]]), np.array([[1.3, 0.6]]), np.array([0])


def test_gl_head_loss_stochastic_gradient_tracks_exact_gradient():
    exact = _exact_c2_grad(MU, VAR)
    _, dmu, dvar = gl_head_loss(MU, VAR, LABEL, 10_000, np.random.default_rng(0))
    got = np.vstack([dmu, dvar])
    assert np.linalg.norm(got - exact) <= 2e-2 * np.linalg.norm(exact)


def test_gl_head_loss_gradient_is_unbiased_across_seeds():
    exact = _exact_c2_grad(MU, VAR)
    draws = np.array([np.vstack(gl_head_loss(MU, VAR, LABEL, 2_000, np.random.default_rng(s))[1:]) for s in range(60)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    # log-of-mean bias is O(1/N), far below the 4 SE band here
    assert np.all(np.abs(draws.mean(axis=0) - exact) <= 4 * se + 1e-4)
