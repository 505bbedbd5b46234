import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mlap.gauss import (RHO_MIN, DiagGaussian, HyperPosterior, clamp_rho, expected_kl_noisy_prior,
                        expected_kl_noisy_prior_grad, hyper_kl, hyper_kl_grad, kl_diag_gaussian,
                        kl_diag_gaussian_grad, kl_mc_oracle, sample_reparam)
from mlap.gradcheck import central_diff, relative_error


def gauss(mu, var):
    return DiagGaussian(np.asarray(mu, float), np.log(np.asarray(var, float)))


def random_pair(rng, d):
    q = DiagGaussian(rng.normal(0, 1, d), rng.uniform(-2, 1, d))
    p = DiagGaussian(rng.normal(0, 1, d), rng.uniform(-1, 1, d))
    return q, p


def test_kl_identical_is_zero():
    q = DiagGaussian(np.array([0.3, -1.0, 2.0]), np.array([-1.0, 0.0, 0.5]))
    assert kl_diag_gaussian(q, q.copy()) == 0.0


def test_kl_known_values_and_mc():
    q, p = gauss([1.0], [1.0]), gauss([0.0], [1.0])
    assert kl_diag_gaussian(q, p) == pytest.approx(0.5)
    est, se = kl_mc_oracle(q, p, 1_000_000, seed=0)
    assert abs(est - 0.5) < 3 * se

    q, p = gauss([0, 0], [1, 1]), gauss([0, 0], [4, 4])
    want = 0.5 * 2 * (math.log(4) + 0.25 - 1)
    assert kl_diag_gaussian(q, p) == pytest.approx(want)
    assert want == pytest.approx(0.6363, abs=1e-4)
    est, se = kl_mc_oracle(q, p, 1_000_000, seed=1)
    assert abs(est - want) < 3 * se


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        kl_diag_gaussian(gauss([0], [1]), gauss([0, 0], [1, 1]))
    with pytest.raises(ValueError):
        DiagGaussian(np.zeros(2), np.zeros(3))


def test_kl_matches_mc_oracle_on_random_pairs():
    rng = np.random.default_rng(42)
    misses = 0
    for i in range(100):
        q, p = random_pair(rng, int(rng.integers(1, 17)))
        est, se = kl_mc_oracle(q, p, 20_000, seed=i)
        misses += abs(est - kl_diag_gaussian(q, p)) > 3 * se
    # 3 standard errors: a couple of misses in 100 is within chance
    assert misses <= 3


def test_mc_oracle_identity_and_determinism():
    q = DiagGaussian(np.array([0.5, -0.5]), np.array([0.2, -0.3]))
    est, se = kl_mc_oracle(q, q, 10_000, seed=3)
    assert abs(est) <= 3 * se + 1e-12
    a, b = kl_mc_oracle(q, gauss([0, 0], [1, 1]), 10_000, seed=9), kl_mc_oracle(q, gauss([0, 0], [1, 1]), 10_000, seed=9)
    assert a == b
    with pytest.raises(ValueError):
        kl_mc_oracle(q, q, 100, seed=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8).flatmap(lambda d: st.tuples(
    arrays(float, d, elements=st.floats(-5, 5)), arrays(float, d, elements=st.floats(-8, 3)),
    arrays(float, d, elements=st.floats(-5, 5)), arrays(float, d, elements=st.floats(-8, 3)))))
def test_kl_non_negative(arrs):
    mq, rq, mp, rp = arrs
    assert kl_diag_gaussian(DiagGaussian(mq, rq), DiagGaussian(mp, rp)) >= 0.0


def test_kl_gradient_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        q, p = random_pair(rng, 6)
        x = np.concatenate([q.mu, q.rho, p.mu, p.rho])

        def f(v):
            return kl_diag_gaussian(DiagGaussian(v[:6], v[6:12]), DiagGaussian(v[12:18], v[18:]))

        ana = np.concatenate(kl_diag_gaussian_grad(q, p))
        assert relative_error(central_diff(f, x, 1e-3), ana).max() < 1e-6
        g_mu = kl_diag_gaussian_grad(q, p)[0]
        np.testing.assert_allclose(g_mu, (q.mu - p.mu) / np.exp(p.rho))


def test_kl_gradient_zero_at_equality():
    q = DiagGaussian(np.array([1.0, 2.0]), np.array([-1.0, 0.5]))
    for g in kl_diag_gaussian_grad(q, q.copy()):
        np.testing.assert_array_equal(g, 0.0)


def test_hyper_kl_examples():
    assert hyper_kl(HyperPosterior(np.zeros(5), 0.7, 0.7)) == pytest.approx(0.0, abs=1e-12)
    assert hyper_kl(HyperPosterior(np.array([2.0]), 1.0, 1.0)) == pytest.approx(2.0)
    h = HyperPosterior(np.array([1.0, 1.0]), 0.5, 2.0)
    want = (2 + 2 * 0.25) / 8 + 2 * math.log(4) - 1
    assert hyper_kl(h) == pytest.approx(want)
    assert want == pytest.approx(2.0851, abs=1e-4)
    # equal to the factorized KL with constant variances
    cross = kl_diag_gaussian(DiagGaussian(h.theta, np.full(2, math.log(0.25))),
                             DiagGaussian(np.zeros(2), np.full(2, math.log(4.0))))
    assert hyper_kl(h) == pytest.approx(cross)


def test_hyper_kl_display_form_agrees_only_in_one_dimension():
    h1 = HyperPosterior(np.array([0.4]), 0.1, 3.0)
    assert hyper_kl(h1, constants_once=True) == pytest.approx(hyper_kl(h1))
    h2 = HyperPosterior(np.array([0.4, 0.1, 0.2]), 0.1, 3.0)
    assert hyper_kl(h2, constants_once=True) < hyper_kl(h2)


def test_hyper_kl_mc_oracle_and_gradient():
    rng = np.random.default_rng(11)
    for i in range(20):
        n = int(rng.integers(1, 10))
        h = HyperPosterior(rng.normal(0, 1, n), float(rng.uniform(0.2, 1.5)), float(rng.uniform(0.5, 3)))
        q = DiagGaussian(h.theta, np.full(n, 2 * math.log(h.kappa_q)))
        p = DiagGaussian(np.zeros(n), np.full(n, 2 * math.log(h.kappa_p)))
        est, se = kl_mc_oracle(q, p, 20_000, seed=i)
        assert abs(est - hyper_kl(h)) < 4 * se
        num = central_diff(lambda t: hyper_kl(HyperPosterior(t, h.kappa_q, h.kappa_p)), h.theta)
        assert relative_error(num, hyper_kl_grad(h)).max() < 1e-6


def test_hyper_posterior_rejects_bad_kappa():
    with pytest.raises(ValueError):
        HyperPosterior(np.zeros(2), 0.0, 1.0)
    with pytest.raises(ValueError):
        HyperPosterior(np.zeros(2), 1.0, -1.0)


def test_sample_reparam():
    g = DiagGaussian(np.array([0.5, -2.0]), np.array([0.3, 1.0]))
    np.testing.assert_array_equal(sample_reparam(g, np.zeros(2)), g.mu)
    unit = DiagGaussian(np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(sample_reparam(unit, np.array([1.0, -2.0])), [1.0, -2.0])
    tiny = DiagGaussian(g.mu, np.full(2, -1000.0))
    np.testing.assert_allclose(sample_reparam(tiny, np.array([3.0, -3.0])), g.mu, atol=3 * math.exp(RHO_MIN / 2))
    with pytest.raises(ValueError):
        sample_reparam(g, np.zeros(3))


def test_sample_reparam_moments():
    g = DiagGaussian(np.array([0.5, -2.0, 1.0]), np.array([0.3, -1.0, 1.5]))
    n = 100_000
    w = sample_reparam(g, np.random.default_rng(0).standard_normal((n, 3)))
    var = np.exp(g.rho)
    assert np.all(np.abs(w.mean(0) - g.mu) < 4 * np.sqrt(var / n))
    # standard error of a sample variance for Gaussian data
    assert np.all(np.abs(w.var(0, ddof=1) - var) < 4 * var * math.sqrt(2 / (n - 1)))


def test_clamp():
    r = clamp_rho(np.array([-50.0, 0.0, 50.0]))
    np.testing.assert_array_equal(r, [-20.0, 0.0, 4.0])
    assert np.all(np.isfinite(DiagGaussian(np.zeros(2), np.array([-1e4, 1e4])).var))


def test_expected_kl_noisy_prior_mc_and_gradient():
    rng = np.random.default_rng(2)
    d, kq = 4, 0.3
    q = DiagGaussian(rng.normal(0, 1, d), rng.uniform(-1, 0.5, d))
    prior = np.concatenate([rng.normal(0, 1, d), rng.uniform(-1, 0.5, d)])
    draws = prior + kq * rng.standard_normal((40_000, 2 * d))
    vals = np.array([kl_diag_gaussian(q, DiagGaussian(x[:d], x[d:])) for x in draws])
    exact = expected_kl_noisy_prior(q, prior, kq)
    assert abs(vals.mean() - exact) < 4 * vals.std() / math.sqrt(vals.size)

    x = np.concatenate([q.flat(), prior])

    def f(v):
        return expected_kl_noisy_prior(DiagGaussian.from_flat(v[:2 * d]), v[2 * d:], kq)

    gmq, grq, gp = expected_kl_noisy_prior_grad(q, prior, kq)
    assert relative_error(central_diff(f, x), np.concatenate([gmq, grq, gp])).max() < 1e-7
