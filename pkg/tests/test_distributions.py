import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from fairsvi import autodiff as ad
from fairsvi.autodiff import Tensor
from fairsvi.distributions import (
    RngStream,
    gamma_logpdf,
    gaussian_logpdf,
    gumbel_softmax,
    inverse_wishart_logpdf,
    inverse_wishart_logpdf_factor,
    logistic_normal_mean,
    logistic_normal_sample,
    mvn_logpdf,
    mvn_logpdf_cov,
    mvn_logpdf_rows,
    sample_gumbel,
    smoothed_group_prob,
    uniform_categorical_logpmf,
)
from fairsvi.errors import DimensionError, DomainError


class TestRngStream:
    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(RngStream(3).normal(size=5), RngStream(3).normal(size=5))

    def test_spawn_is_deterministic_and_independent(self):
        a, b = RngStream(9).spawn(2)
        c, _ = RngStream(9).spawn(2)
        np.testing.assert_array_equal(a.uniform(size=4), c.uniform(size=4))
        assert not np.array_equal(RngStream(9).spawn(2)[0].uniform(size=4), b.uniform(size=4))


class TestGumbel:
    def test_mean_is_euler_mascheroni(self):
        draws = sample_gumbel(1_000_000, RngStream(0))
        assert abs(draws.mean() - np.euler_gamma) < 0.01

    def test_fixed_seed_repeats(self):
        np.testing.assert_array_equal(sample_gumbel(10, RngStream(4)), sample_gumbel(10, RngStream(4)))

    def test_outputs_finite_even_at_clamped_extremes(self):
        class Extreme:
            def uniform(self, size=None):
                return np.array([0.0, 1.0, 0.5])

        assert np.all(np.isfinite(sample_gumbel(3, Extreme())))

    @settings(max_examples=25)
    @given(st.integers(2, 8), st.floats(0.05, 5.0))
    def test_samples_sum_to_one(self, K, tau):
        log_pi = np.log(np.random.default_rng(K).dirichlet(np.ones(K), size=4))
        out = gumbel_softmax(log_pi, tau, RngStream(1)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("pi", [[1 / 3, 1 / 3, 1 / 3], [0.7, 0.2, 0.1]])
    def test_low_temperature_argmax_frequencies(self, pi):
        log_pi = np.tile(np.log(pi), (100_000, 1))
        z = gumbel_softmax(log_pi, 0.1, RngStream(2)).data
        freq = np.bincount(z.argmax(axis=1), minlength=3) / len(z)
        np.testing.assert_allclose(freq, pi, atol=0.02)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_non_positive_temperature_raises(self, tau):
        with pytest.raises(DomainError):
            gumbel_softmax(np.zeros(3), tau, RngStream(0))

    def test_frozen_noise_is_reused(self):
        noise = np.array([0.1, -0.4, 0.3])
        a = gumbel_softmax(np.log([0.2, 0.3, 0.5]), 0.5, noise=noise).data
        expected = np.exp((noise + np.log([0.2, 0.3, 0.5])) / 0.5)
        np.testing.assert_allclose(a, expected / expected.sum())

    def test_differentiable_in_log_pi(self):
        log_pi = Tensor(np.log([0.2, 0.3, 0.5]), requires_grad=True)
        noise = np.array([0.1, -0.4, 0.3])
        w = np.array([1.0, -2.0, 0.5])
        f = lambda: (gumbel_softmax(log_pi, 0.7, noise=noise) * w).sum()  # noqa: E731
        analytic = ad.gradients(f(), {"p": log_pi})["p"]
        numeric = oracles.numeric_gradients(lambda: f().item(), {"p": log_pi})["p"]
        assert oracles.relative_error(analytic, numeric) < 1e-7


class TestLogisticNormal:
    def test_sums_to_one(self):
        out = logistic_normal_sample(np.zeros((5, 4)), np.ones((5, 4)), RngStream(0)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_vanishing_scale_is_softmax_of_mean(self):
        mu = np.array([0.5, -1.0, 2.0])
        out = logistic_normal_sample(mu, np.full(3, 1e-12), RngStream(0)).data
        np.testing.assert_allclose(out, np.exp(mu) / np.exp(mu).sum(), atol=1e-10)

    def test_strong_mean_dominates(self):
        draws = logistic_normal_sample(np.tile([2.0, -2.0], (100_000, 1)), np.ones((100_000, 2)), RngStream(1)).data
        assert draws[:, 0].mean() > 0.9

    def test_log_output_matches(self):
        mu, sigma, noise = np.array([0.1, 0.2]), np.array([1.0, 2.0]), np.array([0.3, -0.5])
        p = logistic_normal_sample(mu, sigma, noise=noise).data
        lp = logistic_normal_sample(mu, sigma, noise=noise, log=True).data
        np.testing.assert_allclose(np.log(p), lp)

    def test_non_positive_scale_raises(self):
        with pytest.raises(DomainError):
            logistic_normal_sample(np.zeros(2), np.array([1.0, 0.0]), RngStream(0))

    def test_mean_matches_independent_monte_carlo(self):
        mu = np.array([[0.5, -0.2, 1.0], [2.0, 0.0, -2.0]])
        sigma = np.array([[1.0, 0.5, 2.0], [0.3, 0.3, 0.3]])
        np.testing.assert_allclose(logistic_normal_mean(mu, sigma), oracles.logistic_normal_mean_mc(mu, sigma), atol=5e-3)

    def test_mean_is_deterministic(self):
        mu, sigma = np.zeros(3), np.ones(3)
        np.testing.assert_array_equal(logistic_normal_mean(mu, sigma), logistic_normal_mean(mu, sigma))


class TestUnivariateDensities:
    def test_standard_normal_at_zero(self):
        assert gaussian_logpdf(0.0, 0.0, 1.0).item() == pytest.approx(-0.9189385, abs=1e-7)

    @settings(max_examples=30)
    @given(st.floats(-10, 10), st.floats(-3, 3), st.floats(0.1, 5))
    def test_gaussian_matches_scipy(self, x, mu, sigma):
        assert gaussian_logpdf(x, mu, sigma).item() == pytest.approx(stats.norm(mu, sigma).logpdf(x), rel=1e-12, abs=1e-12)

    def test_gaussian_rejects_non_positive_scale(self):
        with pytest.raises(DomainError):
            gaussian_logpdf(0.0, 0.0, 0.0)

    def test_uniform_categorical(self):
        assert uniform_categorical_logpmf(4) == pytest.approx(-1.3863, abs=1e-4)
        with pytest.raises(DomainError):
            uniform_categorical_logpmf(1)

    def test_gamma_exponential_special_case(self):
        assert gamma_logpdf(1.0, 1.0, 1.0).item() == pytest.approx(-1.0)

    @settings(max_examples=30)
    @given(st.floats(0.01, 10), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_gamma_matches_scipy(self, s, k, rate):
        want = stats.gamma(a=k, scale=1.0 / rate).logpdf(s)
        assert gamma_logpdf(s, k, rate).item() == pytest.approx(want, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, -1.0)])
    def test_gamma_domain(self, args):
        with pytest.raises(DomainError):
            gamma_logpdf(*args)


class TestMultivariate:
    def test_rows_match_scipy(self):
        gen = np.random.default_rng(0)
        X, mu, C = gen.normal(size=(5, 3)), gen.normal(size=3), gen.normal(size=(3, 2))
        want = stats.multivariate_normal(mu, C @ C.T + np.eye(3)).logpdf(X)
        np.testing.assert_allclose(mvn_logpdf_rows(X, Tensor(mu), Tensor(C)).data, want, rtol=1e-12)
        assert mvn_logpdf(X[0], Tensor(mu), Tensor(C)).item() == pytest.approx(want[0], rel=1e-12)

    def test_zero_factor_is_standard_normal(self):
        x = np.array([[0.3, -1.0]])
        want = stats.norm.logpdf(x).sum()
        assert mvn_logpdf_rows(x, Tensor(np.zeros(2)), Tensor(np.zeros((2, 1)))).item() == pytest.approx(want)

    def test_rows_gradient(self):
        gen = np.random.default_rng(1)
        X = gen.normal(size=(4, 3))
        params = {"mu": Tensor(gen.normal(size=3), requires_grad=True), "C": Tensor(gen.normal(size=(3, 3)), requires_grad=True)}
        w = gen.normal(size=4)
        f = lambda: (mvn_logpdf_rows(X, params["mu"], params["C"]) * w).sum()  # noqa: E731
        analytic = ad.gradients(f(), params)
        numeric = oracles.numeric_gradients(lambda: f().item(), params)
        for k in params:
            assert oracles.relative_error(analytic[k], numeric[k]) < 1e-7

    def test_dense_covariance_density(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        X = np.array([[0.1, 0.2], [1.0, -1.0]])
        want = stats.multivariate_normal([0.5, 0.0], cov).logpdf(X)
        np.testing.assert_allclose(mvn_logpdf_cov(X, [0.5, 0.0], cov).data, want)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            mvn_logpdf_rows(np.zeros((2, 3)), Tensor(np.zeros(2)), Tensor(np.zeros((3, 1))))
        with pytest.raises(DimensionError):
            mvn_logpdf(np.zeros((2, 2)), Tensor(np.zeros(2)), Tensor(np.zeros((2, 1))))


class TestInverseWishart:
    def test_identity_against_textbook_formula(self):
        D = 2
        assert inverse_wishart_logpdf(np.eye(D), D + 2, np.eye(D)) == pytest.approx(
            oracles.inverse_wishart_logpdf_oracle(np.eye(D), D + 2, np.eye(D)), rel=1e-12
        )

    def test_random_matrix_matches_scipy(self):
        gen = np.random.default_rng(2)
        A = gen.normal(size=(3, 3))
        Sigma = A @ A.T + np.eye(3)
        psi = np.diag([1.0, 2.0, 0.5])
        want = stats.invwishart(df=6, scale=psi).logpdf(Sigma)
        assert inverse_wishart_logpdf(Sigma, 6, psi) == pytest.approx(want, rel=1e-10)

    def test_factor_form_matches_dense_and_gradient(self):
        gen = np.random.default_rng(3)
        C = Tensor(gen.normal(size=(2, 2)), requires_grad=True)
        psi = np.array([[1.5, 0.2], [0.2, 1.0]])
        dense = inverse_wishart_logpdf(C.data @ C.data.T + np.eye(2), 4.5, psi)
        assert inverse_wishart_logpdf_factor(C, 4.5, psi).item() == pytest.approx(dense, rel=1e-12)
        f = lambda: inverse_wishart_logpdf_factor(C, 4.5, psi)  # noqa: E731
        analytic = ad.gradients(f(), {"C": C})["C"]
        numeric = oracles.numeric_gradients(lambda: f().item(), {"C": C})["C"]
        assert oracles.relative_error(analytic, numeric) < 1e-7

    @pytest.mark.parametrize(
        "Sigma,nu",
        [(np.eye(2), 1.0), (np.array([[1.0, 2.0], [2.0, 1.0]]), 4.0), (np.array([[1.0, 0.5], [0.0, 1.0]]), 4.0)],
    )
    def test_domain_errors(self, Sigma, nu):
        with pytest.raises(DomainError):
            inverse_wishart_logpdf(Sigma, nu, np.eye(2))


class TestSmoothedGroupProb:
    def test_prior_only(self):
        assert smoothed_group_prob(0, 0, 1.0, 2) == pytest.approx(0.5)

    def test_counts(self):
        assert smoothed_group_prob(8, 10, 1.0, 2) == pytest.approx(0.75)

    @given(st.integers(1, 6), st.floats(0.01, 5.0), st.lists(st.floats(0, 50), min_size=1, max_size=6))
    def test_rows_sum_to_one(self, K, alpha, counts):
        counts = np.resize(np.asarray(counts), K)
        probs = smoothed_group_prob(counts, counts.sum(), alpha, K)
        assert probs.sum() == pytest.approx(1.0)
        assert math.isfinite(probs.min()) and probs.min() > 0
