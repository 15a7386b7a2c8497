"""Independent reference computations used as test oracles.

Nothing here calls into the code under test except to read parameter
values; every quantity is recomputed from its definition with plain
loops, ``math`` and ``scipy``.
"""

import itertools
import math

import numpy as np
from scipy import stats
from scipy.special import logsumexp, multigammaln


def brute_force_epsilon(N_zs, N_s, alpha):
    """Max over classes and ordered pairs of populated groups of the log-ratio."""
    N_zs = np.asarray(N_zs, float)
    N_s = np.asarray(N_s, float)
    G, K = N_zs.shape
    best = -math.inf
    for k in range(K):
        for i in range(G):
            for j in range(G):
                if i == j or N_s[i] <= 0 or N_s[j] <= 0:
                    continue
                pi = (N_zs[i, k] + alpha) / (N_s[i] + K * alpha)
                pj = (N_zs[j, k] + alpha) / (N_s[j] + K * alpha)
                best = max(best, math.log(pi) - math.log(pj))
    return best


def numeric_gradients(f, params, h=1e-6):
    """Central differences of scalar ``f()`` in every entry of every Tensor."""
    out = {}
    for name, p in params.items():
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            down = float(f())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out[name] = grad
    return out


def relative_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, 1e-10)``."""
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-10))


def logistic_normal_mean_mc(mu, sigma, n_draws=400_000, seed=12345):
    """Plain Monte Carlo mean of softmax(mu + sigma * eps) per row."""
    rng = np.random.default_rng(seed)
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    out = np.zeros_like(mu)
    for chunk in range(8):
        eps = rng.normal(size=(n_draws // 8,) + mu.shape)
        h = mu + sigma * eps
        h -= h.max(axis=-1, keepdims=True)
        e = np.exp(h)
        out += (e / e.sum(axis=-1, keepdims=True)).mean(axis=0)
    return out / 8


def nb_log_evidence(codes, probs, K):
    """Per-row ``log sum_z (1/K) prod_d probs[d][z, x_d]`` by explicit loops."""
    rows = []
    for x in codes:
        terms = []
        for z in range(K):
            lp = -math.log(K)
            for d, v in enumerate(x):
                lp += math.log(probs[d][z, v])
            terms.append(lp)
        rows.append(logsumexp(terms))
    return np.array(rows)


def gmm_log_evidence(X, means, factors):
    """Per-row log mixture density with uniform weights and Sigma = C C^T + I."""
    K = len(means)
    comps = np.column_stack(
        [
            stats.multivariate_normal(mean=means[k], cov=factors[k] @ factors[k].T + np.eye(len(means[k]))).logpdf(X)
            for k in range(K)
        ]
    )
    return logsumexp(comps - math.log(K), axis=1)


def sp_log_evidence(t, a, c, prior_z, age_probs, charge_probs, beta0, beta_z, beta_u, beta_c, sigma):
    """Per-row ``log sum_{z,u} p(z|x) p(u) p(a|u) p(c|u) N(t; mean(z,u,c), sigma)``."""
    out = []
    for j in range(len(t)):
        terms = []
        for z, u in itertools.product(range(3), range(2)):
            mean = beta0 + beta_z[z] + beta_u[u] + beta_c[c[j]]
            terms.append(
                math.log(prior_z[j, z])
                + math.log(0.5)
                + math.log(age_probs[u, a[j]])
                + math.log(charge_probs[u, c[j]])
                + stats.norm(mean, sigma).logpdf(t[j])
            )
        out.append(logsumexp(terms))
    return np.array(out)


def inverse_wishart_logpdf_oracle(Sigma, nu, psi):
    """Inverse-Wishart log-density written from its textbook formula."""
    D = Sigma.shape[0]
    _, logdet_psi = np.linalg.slogdet(psi)
    _, logdet_sigma = np.linalg.slogdet(Sigma)
    trace = np.trace(psi @ np.linalg.inv(Sigma))
    return (
        0.5 * nu * logdet_psi
        - 0.5 * nu * D * math.log(2)
        - multigammaln(0.5 * nu, D)
        - 0.5 * (nu + D + 1) * logdet_sigma
        - 0.5 * trace
    )


def rates_by_value(z, labels, K):
    values = sorted(set(labels), key=str)
    table = {}
    for v in values:
        members = [zi for zi, li in zip(z, labels) if li == v]
        table[v] = [sum(1 for m in members if m == k) / len(members) for k in range(K)]
    return table


def delta_dp_oracle(z, labels, K):
    rates = rates_by_value(z, labels, K)
    best = 0.0
    for a, b in itertools.permutations(rates, 2):
        for k in range(K):
            best = max(best, abs(rates[a][k] - rates[b][k]))
    return best


def p_rule_oracle(z, labels, K):
    rates = rates_by_value(z, labels, K)
    worst = 1.0
    for a, b in itertools.permutations(rates, 2):
        for k in range(K):
            if rates[b][k] > 0:
                worst = min(worst, rates[a][k] / rates[b][k])
    return 100.0 * worst


def gamma_sf_oracle(z, groups, K):
    n = len(z)
    overall = [sum(1 for zi in z if zi == k) / n for k in range(K)]
    best = 0.0
    for g in set(groups):
        members = [zi for zi, gi in zip(z, groups) if gi == g]
        share = len(members) / n
        for k in range(K):
            rate = sum(1 for m in members if m == k) / len(members)
            best = max(best, share * abs(overall[k] - rate))
    return best
