"""Distribution primitives against analytic and quadrature oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

import robustvae.autograd as ag
from robustvae.autograd import Tensor
from robustvae.distributions import (
    DiagGaussian,
    LikelihoodParams,
    LOG_2PI,
    kl_diag,
    log_likelihood,
    log_prob_diag,
    reparam_sample,
)

from conftest import assert_grads_close, numeric_grad


# ----------------------------------------------------------------------
# kl_diag
# ----------------------------------------------------------------------

def test_kl_identity_is_zero():
    p = DiagGaussian(np.zeros(2), np.zeros(2))
    assert kl_diag(p, p) == 0.0


def test_kl_unit_mean_shift():
    # 1-D analytic: KL(N(0,1) || N(1,1)) = (mu1-mu2)^2 / 2 = 0.5
    p = DiagGaussian(np.zeros(1), np.zeros(1))
    q = DiagGaussian(np.ones(1), np.zeros(1))
    assert kl_diag(p, q) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_quadrature_oracle():
    rng = np.random.default_rng(7)
    mp, lvp = rng.standard_normal(3), rng.uniform(-1.5, 1.5, 3)
    mq, lvq = rng.standard_normal(3), rng.uniform(-1.5, 1.5, 3)
    p = DiagGaussian(mp, lvp)
    q = DiagGaussian(mq, lvq)

    def kl_1d(mu_p, s2_p, mu_q, s2_q):
        def integrand(z):
            lp = -0.5 * (math.log(2 * math.pi * s2_p) + (z - mu_p) ** 2 / s2_p)
            lq = -0.5 * (math.log(2 * math.pi * s2_q) + (z - mu_q) ** 2 / s2_q)
            return math.exp(lp) * (lp - lq)

        lo = mu_p - 40 * math.sqrt(s2_p)
        hi = mu_p + 40 * math.sqrt(s2_p)
        val, _ = quad(integrand, lo, hi, limit=400)
        return val

    oracle = sum(kl_1d(mp[j], math.exp(lvp[j]), mq[j], math.exp(lvq[j])) for j in range(3))
    assert kl_diag(p, q) == pytest.approx(oracle, rel=1e-6)


def test_kl_dimension_mismatch():
    p = DiagGaussian(np.zeros(2), np.zeros(2))
    q = DiagGaussian(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        kl_diag(p, q)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_kl_non_negative_property(data):
    dim = data.draw(st.integers(1, 5))
    vals = st.floats(-5, 5, allow_nan=False)
    lvs = st.floats(-4, 4, allow_nan=False)
    draw_vec = lambda strat: np.array(data.draw(st.lists(strat, min_size=dim, max_size=dim)))
    p = DiagGaussian(draw_vec(vals), draw_vec(lvs))
    q = DiagGaussian(draw_vec(vals), draw_vec(lvs))
    assert kl_diag(p, q) >= 0.0
    assert kl_diag(p, p) == 0.0


# ----------------------------------------------------------------------
# reparam_sample
# ----------------------------------------------------------------------

def test_reparam_zero_noise_returns_mean(rng):
    d = DiagGaussian(rng.standard_normal(4), rng.uniform(-1, 1, 4))
    np.testing.assert_array_equal(reparam_sample(d, np.zeros(4)), np.asarray(d.mean))


def test_reparam_unit_logvar_shift():
    d = DiagGaussian(np.array([1.0, -2.0]), np.zeros(2))
    np.testing.assert_allclose(reparam_sample(d, np.ones(2)), [2.0, -1.0])


def test_reparam_moments_monte_carlo():
    rng = np.random.default_rng(11)
    mean = np.array([0.3, -1.1, 2.0])
    log_var = np.array([0.4, -0.8, 0.0])
    d = DiagGaussian(mean, log_var)
    n = 100_000
    eps = rng.standard_normal((n, 3))
    samples = np.asarray(reparam_sample(DiagGaussian(np.tile(mean, (n, 1)), np.tile(log_var, (n, 1))), eps))
    var = np.exp(log_var)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(samples.mean(axis=0) - mean) < 3 * se_mean)
    assert np.all(np.abs(samples.var(axis=0, ddof=1) - var) < 3 * se_var)


def test_reparam_dimension_mismatch():
    d = DiagGaussian(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        reparam_sample(d, np.zeros(2))


# ----------------------------------------------------------------------
# log_prob_diag
# ----------------------------------------------------------------------

def test_log_prob_standard_normal_at_zero():
    d = DiagGaussian(np.zeros(1), np.zeros(1))
    assert log_prob_diag(d, np.zeros(1)) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)


def test_log_prob_shift_invariance(rng):
    mu = rng.standard_normal(3)
    lv = rng.uniform(-1, 1, 3)
    a = rng.standard_normal(3)
    lhs = log_prob_diag(DiagGaussian(mu, lv), mu + a)
    rhs = log_prob_diag(DiagGaussian(np.zeros(3), lv), a)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_log_prob_matches_per_dimension_product(rng):
    mu = rng.standard_normal(4)
    lv = rng.uniform(-1.5, 1.5, 4)
    z = rng.standard_normal(4)
    naive = sum(
        -0.5 * (math.log(2 * math.pi * math.exp(lv[j])) + (z[j] - mu[j]) ** 2 / math.exp(lv[j]))
        for j in range(4)
    )
    assert log_prob_diag(DiagGaussian(mu, lv), z) == pytest.approx(naive, abs=1e-10)


# ----------------------------------------------------------------------
# log_likelihood
# ----------------------------------------------------------------------

def test_bernoulli_max_entropy_constant(rng):
    D = 17
    lp = LikelihoodParams("bernoulli-logits", np.zeros(D))
    x = np.where(rng.standard_normal(D) > 0, 1.0, -1.0)
    assert log_likelihood(lp, x) == pytest.approx(-D * math.log(2), abs=1e-12)


def test_gaussian_zero_residual_constant(rng):
    D = 9
    x = rng.uniform(-1, 1, D)
    lp = LikelihoodParams("gaussian-fixed-variance", x.copy(), fixed_sigma=1.0)
    assert log_likelihood(lp, x) == pytest.approx(-0.5 * D * LOG_2PI, abs=1e-12)


def test_bernoulli_matches_naive_sigmoid_sum(rng):
    D = 12
    logits = rng.standard_normal(D) * 2
    x = np.where(rng.standard_normal(D) > 0, 1.0, -1.0)
    lp = LikelihoodParams("bernoulli-logits", logits)
    probs = 1.0 / (1.0 + np.exp(-logits))
    t = (x + 1.0) / 2.0
    naive = float(np.sum(t * np.log(probs) + (1 - t) * np.log1p(-probs)))
    assert log_likelihood(lp, x) == pytest.approx(naive, abs=1e-10)


def test_log_likelihood_rejects_out_of_range():
    lp = LikelihoodParams("bernoulli-logits", np.zeros(3))
    with pytest.raises(ValueError):
        log_likelihood(lp, np.array([0.0, 1.5, 0.0]))


def test_likelihood_validation():
    with pytest.raises(ValueError):
        LikelihoodParams("poisson", np.zeros(3))
    with pytest.raises(ValueError):
        LikelihoodParams("gaussian-fixed-variance", np.zeros(3), fixed_sigma=0.0)


# ----------------------------------------------------------------------
# gradients (central differences, 64-bit, step 1e-5, rel tol 1e-4)
# ----------------------------------------------------------------------

def test_all_operation_gradients(rng):
    mp = rng.standard_normal(3)
    lvp = rng.uniform(-1, 1, 3)
    mq = rng.standard_normal(3)
    lvq = rng.uniform(-1, 1, 3)
    eps = rng.standard_normal(3)
    z = rng.standard_normal(3)
    x = rng.uniform(-0.9, 0.9, 5)
    logits = rng.standard_normal(5)

    cases = [
        (
            lambda arrs: ag.as_tensor(
                kl_diag(DiagGaussian(arrs[0], arrs[1]), DiagGaussian(arrs[2], arrs[3]))
            ),
            [mp, lvp, mq, lvq],
        ),
        (
            lambda arrs: ag.asum(
                ag.square(ag.as_tensor(reparam_sample(DiagGaussian(arrs[0], arrs[1]), arrs[2])))
            ),
            [mp, lvp, eps],
        ),
        (
            lambda arrs: ag.as_tensor(log_prob_diag(DiagGaussian(arrs[0], arrs[1]), arrs[2])),
            [mp, lvp, z],
        ),
        (
            lambda arrs: ag.as_tensor(
                log_likelihood(LikelihoodParams("bernoulli-logits", arrs[0]), x)
            ),
            [logits],
        ),
        (
            lambda arrs: ag.as_tensor(
                log_likelihood(LikelihoodParams("gaussian-fixed-variance", arrs[0], 0.7), x)
            ),
            [logits],
        ),
    ]
    for fn, arrays in cases:
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(leaves)
        out.backward()
        works = [l.data for l in leaves]
        for i, leaf in enumerate(leaves):
            num = numeric_grad(lambda: float(fn([Tensor(w) for w in works]).data), works[i])
            ana = leaf.grad if leaf.grad is not None else np.zeros_like(works[i])
            assert_grads_close(ana, num)
