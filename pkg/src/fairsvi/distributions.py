"""Samplers and log-densities used by the generative models and their priors.

Log-densities accept :class:`~fairsvi.autodiff.Tensor` or array inputs and
return Tensors, so the same code serves training (with gradients) and
evaluation.  The multivariate normal and inverse-Wishart densities take the
covariance *factor* ``C`` of ``Sigma = C C^T + I`` and differentiate through
it via a Cholesky factorization; no explicit inverse is formed on the
forward pass.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln, multigammaln

from . import autodiff as ad
from .autodiff import Tensor, apply_op, as_tensor
from .errors import DimensionError, DomainError

GUMBEL_CLAMP = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class RngStream:
    """Seeded random stream; identical seeds give bit-identical draws."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, a, size=None, p=None, replace=True):
        return self._gen.choice(a, size=size, p=p, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size=size)

    def poisson(self, lam, size=None):
        return self._gen.poisson(lam, size=size)

    def spawn(self, n):
        """Independent child streams, deterministic in the parent seed."""
        seeds = np.random.SeedSequence(self.seed).spawn(n)
        return [RngStream(int(s.generate_state(1, dtype=np.uint64)[0])) for s in seeds]

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def sample_gumbel(shape, rng):
    """Standard Gumbel draws ``-log(-log U)`` with ``U`` clamped into (0, 1)."""
    u = np.clip(rng.uniform(size=shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(log_pi, tau, rng=None, noise=None):
    """Relaxed one-hot sample ``softmax((g + log_pi) / tau)`` along the last axis.

    ``log_pi`` may be unnormalized.  Pass ``noise`` to reuse frozen Gumbel
    draws (gradient checks); otherwise they are drawn from ``rng``.
    """
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    log_pi = as_tensor(log_pi)
    if not np.all(np.isfinite(log_pi.data)):
        raise DomainError("log probabilities must be finite")
    if noise is None:
        noise = sample_gumbel(log_pi.shape, rng)
    return ad.softmax((log_pi + noise) * (1.0 / tau), axis=-1)


def logistic_normal_sample(mu, sigma, rng=None, noise=None, log=False):
    """Softmax of ``mu + sigma * eps`` over the last axis, ``eps ~ N(0, I)``.

    With ``log=True`` the log-probabilities are returned, computed stably.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("logistic-normal scale must be positive")
    if noise is None:
        noise = rng.normal(size=np.broadcast_shapes(mu.shape, sigma.shape))
    h = mu + sigma * noise
    return ad.log_softmax(h, axis=-1) if log else ad.softmax(h, axis=-1)


def logistic_normal_mean(mu, sigma, n_draws=4096, seed=0):
    """Monte Carlo estimate of ``E[softmax(mu + sigma * eps)]`` (plain arrays).

    Antithetic pairs and a fixed internal seed keep the estimate deterministic.
    All leading rows share the same noise, so rows with equal parameters get
    equal estimates.
    """
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    shape = np.broadcast_shapes(mu.shape, sigma.shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    half = rng.normal(size=(n_draws // 2,) + (1,) * (len(shape) - 1) + shape[-1:])
    eps = np.concatenate([half, -half])
    h = mu + sigma * eps
    h = h - h.max(axis=-1, keepdims=True)
    e = np.exp(h)
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=0)


# -- univariate densities ---------------------------------------------------
def gaussian_logpdf(x, mu, sigma):
    """Elementwise ``log N(x; mu, sigma^2)``."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("standard deviation must be positive")
    z = (x - mu) / sigma
    return -0.5 * LOG_2PI - ad.log(sigma) - 0.5 * ad.square(z)


def gamma_logpdf(s, shape, rate):
    """Gamma log-density in shape-rate form, elementwise.

    ``shape * log(rate) - lgamma(shape) + (shape - 1) log s - rate * s``
    """
    s = as_tensor(s)
    shape = np.asarray(shape, float)
    rate = np.asarray(rate, float)
    if np.any(s.data <= 0):
        raise DomainError("gamma support is s > 0")
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise DomainError("gamma shape and rate must be positive")
    const = shape * np.log(rate) - gammaln(shape)
    return const + (shape - 1.0) * ad.log(s) - rate * s


def uniform_categorical_logpmf(K):
    if K < 2:
        raise DomainError(f"need at least two categories, got {K}")
    return -math.log(K)


# -- multivariate densities via Sigma = C C^T + I ---------------------------
def _factor_cov(C):
    C = np.asarray(C, float)
    return C @ C.T + np.eye(C.shape[0])


def mvn_logpdf_rows(X, mu, C):
    """``log N(x_j; mu, C C^T + I)`` for every row of ``X``.

    Parameters
    ----------
    X : (n, D) array or Tensor
    mu : (D,) Tensor
    C : (D, r) Tensor

    Returns
    -------
    Tensor of shape (n,)
    """
    X, mu, C = as_tensor(X), as_tensor(mu), as_tensor(C)
    if X.ndim != 2 or mu.shape != (X.shape[1],) or C.ndim != 2 or C.shape[0] != X.shape[1]:
        raise DimensionError(
            f"incompatible shapes X{X.shape}, mu{mu.shape}, C{C.shape}"
        )
    D = X.shape[1]
    cov = _factor_cov(C.data)
    L = np.linalg.cholesky(cov)
    resid = X.data - mu.data
    white = solve_triangular(L, resid.T, lower=True)  # (D, n)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    out = -0.5 * (D * LOG_2PI + logdet + (white * white).sum(axis=0))

    def vjp(g):
        alpha = cho_solve((L, True), resid.T)  # Sigma^{-1} r_j, (D, n)
        g_x = -(alpha * g).T
        g_mu = (alpha * g).sum(axis=1)
        # d/dSigma of sum_j g_j * logpdf_j
        cov_inv = cho_solve((L, True), np.eye(D))
        g_cov = 0.5 * ((alpha * g) @ alpha.T - g.sum() * cov_inv)
        g_C = (g_cov + g_cov.T) @ C.data
        return g_x, g_mu, g_C

    return apply_op("mvn_logpdf", out, (X, mu, C), vjp)


def mvn_logpdf(x, mu, C):
    """Log-density of one vector under ``N(mu, C C^T + I)``."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError("mvn_logpdf expects a single vector")
    return mvn_logpdf_rows(x.reshape(1, -1), mu, C).sum()


def mvn_logpdf_cov(X, mean, cov):
    """Row log-densities under a fixed dense covariance; differentiable in ``X``.

    Used for priors whose mean and covariance are constants.
    """
    X = as_tensor(X)
    mean, cov = np.asarray(mean, float), np.asarray(cov, float)
    if X.ndim != 2 or mean.shape[-1] != X.shape[1] or cov.shape != (X.shape[1],) * 2:
        raise DimensionError(f"incompatible shapes X{X.shape}, mean{mean.shape}, cov{cov.shape}")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance must be positive definite") from exc
    resid = X.data - mean
    white = solve_triangular(L, resid.T, lower=True)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    out = -0.5 * (X.shape[1] * LOG_2PI + logdet + (white * white).sum(axis=0))
    return apply_op(
        "mvn_logpdf_cov",
        out,
        (X,),
        lambda g: (-(cho_solve((L, True), resid.T) * g).T,),
    )


def _iw_normalizer(nu, psi):
    D = psi.shape[0]
    sign, logdet_psi = np.linalg.slogdet(psi)
    if sign <= 0:
        raise DomainError("inverse-Wishart scale matrix must be positive definite")
    return 0.5 * nu * logdet_psi - 0.5 * nu * D * math.log(2.0) - multigammaln(0.5 * nu, D)


def inverse_wishart_logpdf(Sigma, nu, psi):
    """Inverse-Wishart log-density of a dense SPD matrix (plain arrays)."""
    Sigma, psi = np.asarray(Sigma, float), np.asarray(psi, float)
    D = Sigma.shape[0]
    if Sigma.shape != (D, D) or psi.shape != (D, D):
        raise DimensionError("Sigma and psi must be square and of equal size")
    if nu <= D - 1:
        raise DomainError(f"degrees of freedom must exceed D - 1 = {D - 1}")
    if not np.allclose(Sigma, Sigma.T):
        raise DomainError("Sigma must be symmetric")
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise DomainError("Sigma must be positive definite") from exc
    logdet = 2.0 * np.log(np.diag(L)).sum()
    trace = np.trace(cho_solve((L, True), psi))
    return _iw_normalizer(nu, psi) - 0.5 * (nu + D + 1) * logdet - 0.5 * trace


def inverse_wishart_logpdf_factor(C, nu, psi):
    """Inverse-Wishart log-density of ``C C^T + I``, differentiable in ``C``."""
    C = as_tensor(C)
    psi = np.asarray(psi, float)
    D = C.shape[0]
    if nu <= D - 1:
        raise DomainError(f"degrees of freedom must exceed D - 1 = {D - 1}")
    cov = _factor_cov(C.data)
    L = np.linalg.cholesky(cov)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    inv_psi = cho_solve((L, True), psi)  # Sigma^{-1} psi
    value = _iw_normalizer(nu, psi) - 0.5 * (nu + D + 1) * logdet - 0.5 * np.trace(inv_psi)

    def vjp(g):
        cov_inv = cho_solve((L, True), np.eye(D))
        g_cov = g * (-0.5 * (nu + D + 1) * cov_inv + 0.5 * inv_psi @ cov_inv)
        return ((g_cov + g_cov.T) @ C.data,)

    return apply_op("inverse_wishart_logpdf", np.asarray(value), (C,), vjp)


# -- Dirichlet-multinomial smoothing ----------------------------------------
def smoothed_group_prob(N_zs, N_s, alpha, K):
    """Posterior predictive ``(N_zs + alpha) / (N_s + K alpha)``.

    Works elementwise on arrays and on Tensors (gradient flows through both
    count arguments).
    """
    if isinstance(N_zs, Tensor) or isinstance(N_s, Tensor):
        return (as_tensor(N_zs) + alpha) / (as_tensor(N_s) + K * alpha)
    return (np.asarray(N_zs, float) + alpha) / (np.asarray(N_s, float) + K * alpha)


__all__ = [
    "RngStream",
    "sample_gumbel",
    "gumbel_softmax",
    "logistic_normal_sample",
    "logistic_normal_mean",
    "gaussian_logpdf",
    "gamma_logpdf",
    "uniform_categorical_logpmf",
    "mvn_logpdf",
    "mvn_logpdf_rows",
    "mvn_logpdf_cov",
    "inverse_wishart_logpdf",
    "inverse_wishart_logpdf_factor",
    "smoothed_group_prob",
]
