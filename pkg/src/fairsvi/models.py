"""Discrete latent variable models, inference networks and their ELBOs.

Three generative models share one recipe: an inference network outputs
unnormalized log class probabilities, a relaxed Gumbel-Softmax sample
weights the class-conditional log-likelihoods, and the discrete KL (or
cross-entropy/entropy) terms are computed analytically.

* naive Bayes (``nb``): categorical attributes, logistic-normal
  class-conditionals with Gaussian and Gamma hyper-priors;
* Gaussian mixture (``gmm``): ``N(mu_k, C_k C_k^T + I)`` with
  multivariate-normal and inverse-Wishart hyper-priors;
* criminal-justice model (``sp``): risk class ``z`` (3 classes) with a
  learned prior network on criminal history, binary ``u`` explaining age
  band and charge degree, and a Gaussian regression for log jail days.

ELBO functions return the *sum* over the minibatch plus ``prior_scale``
times the hyper-prior log-density; the training loop passes
``prior_scale = m / n`` so that one epoch adds the hyper-prior once.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .distributions import (
    gamma_logpdf,
    gaussian_logpdf,
    gumbel_softmax,
    inverse_wishart_logpdf_factor,
    logistic_normal_mean,
    mvn_logpdf_cov,
    mvn_logpdf_rows,
)
from .errors import ContractError, DomainError, TrainingDivergence

CHECKPOINT_FORMAT = "fairsvi-checkpoint/1"
SP_Z_CLASSES = 3
SP_U_CLASSES = 2
ACTIVATIONS = {"relu": ad.relu, "softplus": ad.softplus}


def inverse_softplus(y):
    y = np.asarray(y, float)
    return y + np.log(-np.expm1(-y))


def _param(value, name):
    return Tensor(np.array(value, dtype=float), requires_grad=True, name=name)


def _check_finite(parts):
    for name, value in parts.items():
        if not np.all(np.isfinite(as_tensor(value).data)):
            raise TrainingDivergence(name, f"ELBO term {name!r} is not finite")


class InferenceNet:
    """MLP producing unnormalized log class probabilities.

    Hidden layers use the chosen activation followed by dropout; the output
    layer is batch-normalized (per-batch statistics in training, running
    averages in evaluation).
    """

    def __init__(
        self,
        in_dim,
        out_dim,
        widths=(64, 32),
        activation="relu",
        dropout=0.1,
        batch_norm=True,
        rng=None,
        name="net",
    ):
        if activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise DomainError(f"dropout probability must lie in [0, 1), got {dropout}")
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.dropout = float(dropout)
        self.batch_norm = bool(batch_norm)
        self.name = name
        self.params = {}
        dims = [self.in_dim, *self.widths, self.out_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            gain = 6.0 / a if activation == "relu" else 6.0 / (a + b)
            limit = math.sqrt(gain)
            W = rng.uniform(size=(a, b), low=-limit, high=limit) if rng is not None else np.zeros((a, b))
            self.params[f"{name}.W{i}"] = _param(W, f"{name}.W{i}")
            self.params[f"{name}.b{i}"] = _param(np.zeros(b), f"{name}.b{i}")
        self.n_layers = len(dims) - 1
        if self.batch_norm:
            self.params[f"{name}.bn_gamma"] = _param(np.ones(self.out_dim), f"{name}.bn_gamma")
            self.params[f"{name}.bn_beta"] = _param(np.zeros(self.out_dim), f"{name}.bn_beta")
            self.running_mean = np.zeros(self.out_dim)
            self.running_var = np.ones(self.out_dim)

    def __call__(self, x, training=False, rng=None):
        act = ACTIVATIONS[self.activation]
        h = as_tensor(x)
        for i in range(self.n_layers):
            h = h @ self.params[f"{self.name}.W{i}"] + self.params[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                h = ad.dropout(act(h), 1.0 - self.dropout, rng, training)
        if self.batch_norm:
            h = ad.batch_norm(
                h,
                self.params[f"{self.name}.bn_gamma"],
                self.params[f"{self.name}.bn_beta"],
                self.running_mean,
                self.running_var,
                training,
            )
        return h

    def weights(self):
        return [self.params[f"{self.name}.W{i}"] for i in range(self.n_layers)]

    def buffers(self):
        if not self.batch_norm:
            return {}
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def config(self):
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "widths": list(self.widths),
            "activation": self.activation,
            "dropout": self.dropout,
            "batch_norm": self.batch_norm,
            "name": self.name,
        }


def categorical_kl_uniform(log_pi):
    """Row-wise ``KL(pi || uniform) = sum_k pi_k (log pi_k + log K)``."""
    log_pi = as_tensor(log_pi)
    K = log_pi.shape[-1]
    return (ad.exp(log_pi) * (log_pi + math.log(K))).sum(axis=-1)


def _block_log_softmax(h, blocks):
    return ad.concat([ad.log_softmax(h[:, s:e], axis=-1) for _, s, e in blocks], axis=1)


def _block_mean_log(mu, sigma, blocks):
    """Log of the logistic-normal mean probabilities, block by block."""
    parts = [np.log(logistic_normal_mean(mu[:, s:e], sigma[:, s:e])) for _, s, e in blocks]
    return np.concatenate(parts, axis=1)


@dataclass
class ElboTerms:
    """Minibatch ELBO with the pieces the training loop needs."""

    total: Tensor
    rows: Tensor
    z: Tensor
    log_pi: Tensor
    parts: dict = field(default_factory=dict)
    u: Tensor | None = None


def _hyper_array(value, K, width):
    value = np.asarray(value, float)
    return value.reshape(-1, 1) * np.ones((K, width)) if value.ndim == 1 else np.broadcast_to(value, (K, width))


# -- naive Bayes ---------------------------------------------------------------
@dataclass
class NBHyper:
    """Hyper-priors: ``mu ~ N(mu, sigma)`` per class, ``s.d. ~ Gamma(kappa, eta)``."""

    mu: object = 0.0
    sigma: float = 1.0
    kappa: float = 1.0
    eta: float = 2.0


@dataclass
class NBParams:
    mu: Tensor
    sigma_raw: Tensor
    blocks: list
    hyper: NBHyper

    @classmethod
    def initialize(cls, K, blocks, hyper=None, rng=None, init_sd=0.5):
        hyper = hyper or NBHyper()
        V = blocks[-1][2]
        mu0 = _hyper_array(hyper.mu, K, V)
        mu = mu0 + rng.normal(size=(K, V))
        sigma_raw = np.full((K, V), float(inverse_softplus(init_sd)))
        return cls(_param(mu, "nb.mu"), _param(sigma_raw, "nb.sigma_raw"), list(blocks), hyper)

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def sigma(self):
        return ad.softplus(self.sigma_raw)

    def tensors(self):
        return {"nb.mu": self.mu, "nb.sigma_raw": self.sigma_raw}

    def log_hyperprior(self):
        h = self.hyper
        mu0 = _hyper_array(h.mu, self.K, self.mu.shape[1])
        return (
            gaussian_logpdf(self.mu, mu0, h.sigma).sum()
            + gamma_logpdf(self.sigma, h.kappa, h.eta).sum()
        )

    def log_probs_sample(self, rng):
        """One logistic-normal draw of log category probabilities, (K, V)."""
        h = self.mu + self.sigma * rng.normal(size=self.mu.shape)
        return _block_log_softmax(h, self.blocks)

    def log_probs_mean(self):
        return _block_mean_log(self.mu.data, ad.softplus(self.sigma_raw.data).data, self.blocks)


def nb_elbo(x, params, net, tau, rng, prior_scale=0.0, training=True):
    """Naive Bayes minibatch ELBO.

    Parameters
    ----------
    x : (m, V) array
        Concatenated one-hot attributes, laid out as ``params.blocks``.
    params : NBParams
    net : InferenceNet
    tau : float
        Gumbel-Softmax temperature.
    rng : RngStream
        Source of dropout, Gumbel and logistic-normal noise, in that order.
    prior_scale : float
        Weight of the hyper-prior term (``m / n`` during training).
    """
    x = np.asarray(x, float)
    log_pi = ad.log_softmax(net(x, training=training, rng=rng), axis=-1)
    _check_finite({"log_pi": log_pi})
    z = gumbel_softmax(log_pi, tau, rng)
    log_y = params.log_probs_sample(rng)
    recon = (z * (x @ log_y.transpose())).sum(axis=1)
    kl = categorical_kl_uniform(log_pi)
    hyper = params.log_hyperprior()
    rows = recon - kl
    parts = {"reconstruction": recon.sum(), "kl": kl.sum(), "hyperprior": hyper}
    _check_finite(parts)
    return ElboTerms(rows.sum() + prior_scale * hyper, rows, z, log_pi, parts)


def nb_log_marginal(x, params):
    """Exact ``log sum_z p(z) p(x | z)`` per row with mean category probabilities."""
    log_y = params.log_probs_mean()
    cond = np.asarray(x, float) @ log_y.T - math.log(params.K)
    top = cond.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(cond - top).sum(axis=1, keepdims=True)))[:, 0]


# -- Gaussian mixture ----------------------------------------------------------
@dataclass
class GMMHyper:
    """``mu_k ~ N(mu[k], cov)``; ``Sigma_k ~ IW(nu, psi)``."""

    mu: np.ndarray
    cov: np.ndarray
    nu: float
    psi: np.ndarray

    @classmethod
    def default(cls, centers):
        centers = np.asarray(centers, float)
        D = centers.shape[1]
        return cls(centers, np.eye(D), D + 2.0, np.eye(D))


@dataclass
class GMMParams:
    mu: Tensor
    C: Tensor
    hyper: GMMHyper

    @classmethod
    def initialize(cls, hyper, rank=None, rng=None, init_sd=0.1):
        K, D = hyper.mu.shape
        rank = D if rank is None else int(rank)
        mu = hyper.mu + init_sd * rng.normal(size=(K, D))
        C = init_sd * rng.normal(size=(K, D, rank))
        return cls(_param(mu, "gmm.mu"), _param(C, "gmm.C"), hyper)

    @property
    def K(self):
        return self.mu.shape[0]

    def tensors(self):
        return {"gmm.mu": self.mu, "gmm.C": self.C}

    def covariance(self, k):
        C = self.C.data[k]
        return C @ C.T + np.eye(C.shape[0])

    def component_loglik(self, X):
        cols = [mvn_logpdf_rows(X, self.mu[k], self.C[k]).reshape(-1, 1) for k in range(self.K)]
        return ad.concat(cols, axis=1)

    def log_hyperprior(self):
        h = self.hyper
        total = mvn_logpdf_cov(self.mu, h.mu, h.cov).sum()
        for k in range(self.K):
            total = total + inverse_wishart_logpdf_factor(self.C[k], h.nu, h.psi)
        return total


def gmm_elbo(x, params, net, tau, rng, prior_scale=0.0, training=True):
    """Gaussian-mixture minibatch ELBO; arguments as :func:`nb_elbo`."""
    x = np.asarray(x, float)
    log_pi = ad.log_softmax(net(x, training=training, rng=rng), axis=-1)
    _check_finite({"log_pi": log_pi})
    z = gumbel_softmax(log_pi, tau, rng)
    recon = (z * params.component_loglik(x)).sum(axis=1)
    kl = categorical_kl_uniform(log_pi)
    hyper = params.log_hyperprior()
    rows = recon - kl
    parts = {"reconstruction": recon.sum(), "kl": kl.sum(), "hyperprior": hyper}
    _check_finite(parts)
    return ElboTerms(rows.sum() + prior_scale * hyper, rows, z, log_pi, parts)


def gmm_log_marginal(x, params):
    cond = params.component_loglik(np.asarray(x, float)).data - math.log(params.K)
    top = cond.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(cond - top).sum(axis=1, keepdims=True)))[:, 0]


# -- criminal-justice model ----------------------------------------------------
@dataclass
class SPHyper:
    """Hyper-priors of the criminal-justice model.

    ``beta_z ~ N(mu_z, sigma_z)``; ``beta0 ~ N(mu_beta0, sigma_beta0)``;
    ``beta_u, beta_c ~ N(mu, sigma)``; ``sigma_t ~ Gamma(kappa, eta)``;
    class-conditional logistic-normal means ``~ N(mu_u, sigma_u)`` and
    scales ``~ Gamma(kappa_u, eta_u)``.
    """

    mu_z: tuple = (-1.0, 0.0, 1.0)
    sigma_z: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    mu_beta0: float = 0.0
    sigma_beta0: float = 10.0
    kappa: float = 2.0
    eta: float = 2.0
    mu_u: float = 0.0
    sigma_u: float = 1.0
    kappa_u: float = 1.0
    eta_u: float = 2.0


@dataclass
class SPParams:
    prior_net: InferenceNet
    beta0: Tensor
    beta_z: Tensor
    beta_u: Tensor
    beta_c: Tensor
    sigma_t_raw: Tensor
    mu_u: Tensor
    sigma_u_raw: Tensor
    blocks_u: list
    hyper: SPHyper

    @classmethod
    def initialize(cls, n_age, n_charge, hyper=None, rng=None, t_mean=0.0, t_sd=1.0, **net_kwargs):
        hyper = hyper or SPHyper()
        width = n_age + n_charge
        net_kwargs = {k: v for k, v in net_kwargs.items() if k != "batch_norm"}
        prior_net = InferenceNet(4, SP_Z_CLASSES, rng=rng, name="prior", batch_norm=False, **net_kwargs)
        return cls(
            prior_net=prior_net,
            beta0=_param([t_mean], "sp.beta0"),
            beta_z=_param(0.1 * rng.normal(size=3), "sp.beta_z"),
            beta_u=_param(0.1 * rng.normal(size=2), "sp.beta_u"),
            beta_c=_param(0.1 * rng.normal(size=n_charge), "sp.beta_c"),
            sigma_t_raw=_param([float(inverse_softplus(t_sd))], "sp.sigma_t_raw"),
            mu_u=_param(hyper.mu_u + rng.normal(size=(2, width)), "sp.mu_u"),
            sigma_u_raw=_param(np.full((2, width), float(inverse_softplus(0.5))), "sp.sigma_u_raw"),
            blocks_u=[("a", 0, n_age), ("c", n_age, width)],
            hyper=hyper,
        )

    @property
    def sigma_t(self):
        return ad.softplus(self.sigma_t_raw)

    @property
    def sigma_u(self):
        return ad.softplus(self.sigma_u_raw)

    def regression_tensors(self):
        return {
            "sp.beta0": self.beta0,
            "sp.beta_z": self.beta_z,
            "sp.beta_u": self.beta_u,
            "sp.beta_c": self.beta_c,
            "sp.sigma_t_raw": self.sigma_t_raw,
        }

    def tensors(self):
        out = dict(self.prior_net.params)
        out.update(self.regression_tensors())
        out["sp.mu_u"] = self.mu_u
        out["sp.sigma_u_raw"] = self.sigma_u_raw
        return out

    def log_hyperprior(self):
        h = self.hyper
        return (
            gaussian_logpdf(self.beta_z, np.asarray(h.mu_z, float), h.sigma_z).sum()
            + gaussian_logpdf(self.beta0, h.mu_beta0, h.sigma_beta0).sum()
            + gaussian_logpdf(self.beta_u, h.mu, h.sigma).sum()
            + gaussian_logpdf(self.beta_c, h.mu, h.sigma).sum()
            + gamma_logpdf(self.sigma_t, h.kappa, h.eta).sum()
            + gaussian_logpdf(self.mu_u, h.mu_u, h.sigma_u).sum()
            + gamma_logpdf(self.sigma_u, h.kappa_u, h.eta_u).sum()
        )

    def cell_means(self, c):
        """Regression mean for every (z, u) cell: array (m, 3, 2)."""
        b0 = self.beta0.data[0]
        return (
            b0
            + self.beta_z.data[None, :, None]
            + self.beta_u.data[None, None, :]
            + self.beta_c.data[np.asarray(c)][:, None, None]
        )


@dataclass
class SPBatch:
    """Criminal-justice model inputs for a set of rows.

    ``xz`` holds (m, f, p, d); ``xu`` the one-hot age band and charge
    degree; ``t`` the log jail days and ``t_in`` its standardized copy fed
    to the variational networks.
    """

    xz: np.ndarray
    a: np.ndarray
    c: np.ndarray
    t: np.ndarray
    xu: np.ndarray
    t_in: np.ndarray

    def __len__(self):
        return len(self.t)

    def take(self, idx):
        return SPBatch(*(getattr(self, f)[idx] for f in ("xz", "a", "c", "t", "xu", "t_in")))

    @property
    def qz_input(self):
        return np.concatenate([self.xz, self.t_in], axis=1)

    @property
    def qu_input(self):
        return np.concatenate([self.xu, self.t_in], axis=1)


def sp_elbo(batch, params, nets, tau, rng, prior_scale=0.0, training=True):
    """Criminal-justice model minibatch ELBO.

    ``nets`` is ``(q_z, q_u)``.  Terms per row: Gaussian regression of ``t``
    on relaxed ``z`` and ``u`` plus the charge coefficient, NB-style
    likelihood of (age band, charge degree) given ``u``, analytic
    cross-entropy of ``q(z)`` against the prior network, ``log p(u)``, and
    the analytic entropies of both variational factors.
    """
    q_z, q_u = nets
    log_qz = ad.log_softmax(q_z(batch.qz_input, training=training, rng=rng), axis=-1)
    log_qu = ad.log_softmax(q_u(batch.qu_input, training=training, rng=rng), axis=-1)
    log_pz = ad.log_softmax(params.prior_net(batch.xz, training=training, rng=rng), axis=-1)
    _check_finite({"log_qz": log_qz, "log_qu": log_qu, "log_prior_z": log_pz})
    z = gumbel_softmax(log_qz, tau, rng)
    u = gumbel_softmax(log_qu, tau, rng)
    mean = params.beta0 + z @ params.beta_z + u @ params.beta_u + ad.take(params.beta_c, batch.c)
    regression = gaussian_logpdf(batch.t, mean, params.sigma_t)
    h = params.mu_u + params.sigma_u * rng.normal(size=params.mu_u.shape)
    log_y = _block_log_softmax(h, params.blocks_u)
    xu_lik = (u * (batch.xu @ log_y.transpose())).sum(axis=1)
    qz = ad.exp(log_qz)
    qu = ad.exp(log_qu)
    cross_z = (qz * log_pz).sum(axis=1)
    entropy_z = -(qz * log_qz).sum(axis=1)
    entropy_u = -(qu * log_qu).sum(axis=1)
    log_pu = -math.log(SP_U_CLASSES)
    hyper = params.log_hyperprior()
    rows = regression + xu_lik + cross_z + log_pu + entropy_z + entropy_u
    parts = {
        "regression": regression.sum(),
        "xu_likelihood": xu_lik.sum(),
        "prior_z": cross_z.sum(),
        "entropy_z": entropy_z.sum(),
        "entropy_u": entropy_u.sum(),
        "hyperprior": hyper,
    }
    _check_finite(parts)
    return ElboTerms(rows.sum() + prior_scale * hyper, rows, z, log_qz, parts, u=u)


def sp_log_joint_table(batch, params):
    """``log p(t, a, c, z, u | x^(z))`` for every row and (z, u) cell: (m, 3, 2)."""
    log_pz = ad.log_softmax(params.prior_net(batch.xz, training=False), axis=-1).data
    log_y = _block_mean_log(params.mu_u.data, ad.softplus(params.sigma_u_raw.data).data, params.blocks_u)
    xu_lik = batch.xu @ log_y.T  # (m, 2)
    sigma = float(ad.softplus(params.sigma_t_raw.data).data[0])
    means = params.cell_means(batch.c)
    resid = (batch.t[:, None, None] - means) / sigma
    reg = -0.5 * math.log(2 * math.pi) - math.log(sigma) - 0.5 * resid**2
    return reg + log_pz[:, :, None] + xu_lik[:, None, :] - math.log(SP_U_CLASSES)


def sp_log_marginal(batch, params):
    table = sp_log_joint_table(batch, params).reshape(len(batch), -1)
    top = table.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(table - top).sum(axis=1, keepdims=True)))[:, 0]


def sp_warm_start_rows(batch, params, rng=None, training=True):
    """``log sum_z p(z | x^(z)) N(t; beta0 + beta_z[z], sigma_t)`` per row."""
    log_pz = ad.log_softmax(params.prior_net(batch.xz, training=training, rng=rng), axis=-1)
    mean = params.beta0 + params.beta_z  # (3,)
    t = batch.t.reshape(-1, 1)
    reg = gaussian_logpdf(t, mean.reshape(1, -1), params.sigma_t)
    return ad.logsumexp(log_pz + reg, axis=1)


def sp_predict_jail_time(batch, params, nets):
    """``E[t] = sum_{z,u} q(z) q(u) mean(z, u, c)`` on the log-days scale."""
    q_z, q_u = nets
    pz = ad.softmax(q_z(batch.qz_input, training=False), axis=-1).data
    pu = ad.softmax(q_u(batch.qu_input, training=False), axis=-1).data
    means = params.cell_means(batch.c)
    return np.einsum("nz,nu,nzu->n", pz, pu, means)


# -- assignments ---------------------------------------------------------------
def posterior(net, inputs):
    """Class probability rows from a network in evaluation mode."""
    return ad.softmax(net(inputs, training=False), axis=-1).data


def assign_hard(rows):
    """Argmax class ids; ties go to the lowest id."""
    return np.argmax(np.asarray(rows), axis=1)


def fair_objective(elbo_sum, penalty, lam, m):
    """``-(1/m) sum_j L_j + lam * F``: the quantity the optimizer minimizes."""
    return -as_tensor(elbo_sum) * (1.0 / m) + as_tensor(penalty) * lam


# -- model wrappers ------------------------------------------------------------
@dataclass
class ArrayBatch:
    x: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, idx):
        return ArrayBatch(self.x[idx])


class LatentModel:
    """Shared plumbing: parameters, batches, evaluation and checkpoints."""

    kind = None

    def parameters(self):
        raise NotImplementedError

    def nets(self):
        raise NotImplementedError

    def variational_nets(self):
        return self.nets()

    def l2_penalty(self):
        total = None
        for net in self.variational_nets():
            for W in net.weights():
                term = ad.square(W).sum()
                total = term if total is None else total + term
        return total

    def buffers(self):
        out = {}
        for net in self.nets():
            out.update(net.buffers())
        return out

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.parameters().items()}
        out.update({name: b.copy() for name, b in self.buffers().items()})
        return out

    def load_state_dict(self, state):
        params = self.parameters()
        buffers = self.buffers()
        for name, value in state.items():
            if name in params:
                if params[name].shape != np.shape(value):
                    raise ContractError(f"shape mismatch for {name}")
                params[name].data = np.array(value, dtype=float)
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise ContractError(f"unexpected checkpoint entry {name!r}")

    def assignments(self, batch):
        return assign_hard(self.posterior(batch))


class NaiveBayes(LatentModel):
    kind = "nb"

    def __init__(
        self, blocks, K=2, hyper=None, rng=None, widths=(64, 32), activation="relu", dropout=0.1, batch_norm=True
    ):
        self.K = int(K)
        self.blocks = [tuple(b) for b in blocks]
        self.params = NBParams.initialize(self.K, self.blocks, hyper, rng)
        V = self.blocks[-1][2]
        self.net = InferenceNet(V, self.K, widths, activation, dropout, batch_norm, rng=rng, name="q_z")

    @classmethod
    def from_data(cls, data, rng, K=2, hyper=None, **net_kwargs):
        _, blocks = data.onehot()
        return cls(blocks, K=K, hyper=hyper, rng=rng, **net_kwargs)

    def make_batch(self, data):
        x, blocks = data.onehot()
        if [tuple(b) for b in blocks] != self.blocks:
            raise ContractError("dataset columns do not match the model's attribute blocks")
        return ArrayBatch(x)

    def parameters(self):
        out = self.params.tensors()
        out.update(self.net.params)
        return out

    def nets(self):
        return [self.net]

    def elbo(self, batch, tau, rng, prior_scale=0.0, training=True):
        return nb_elbo(batch.x, self.params, self.net, tau, rng, prior_scale, training)

    def posterior(self, batch):
        return posterior(self.net, batch.x)

    def log_marginal(self, batch):
        return nb_log_marginal(batch.x, self.params)

    def points(self, batch):
        return batch.x

    def spec(self):
        return {
            "kind": self.kind,
            "K": self.K,
            "blocks": [list(b) for b in self.blocks],
            "hyper": _jsonable(asdict(self.params.hyper)),
            "net": self.net.config(),
        }


class GaussianMixture(LatentModel):
    kind = "gmm"

    def __init__(
        self, hyper, rank=None, rng=None, widths=(64, 32), activation="relu", dropout=0.1, batch_norm=True
    ):
        self.params = GMMParams.initialize(hyper, rank, rng)
        self.K, D = hyper.mu.shape
        self.rank = self.params.C.shape[2]
        self.net = InferenceNet(D, self.K, widths, activation, dropout, batch_norm, rng=rng, name="q_z")

    @classmethod
    def from_data(cls, data, rng, K=3, rank=None, hyper=None, **net_kwargs):
        from .data import kmeans

        if hyper is None:
            centers, _ = kmeans(data.continuous_matrix(), K, rng)
            hyper = GMMHyper.default(centers)
        return cls(hyper, rank=rank, rng=rng, **net_kwargs)

    def make_batch(self, data):
        return ArrayBatch(data.continuous_matrix())

    def parameters(self):
        out = self.params.tensors()
        out.update(self.net.params)
        return out

    def nets(self):
        return [self.net]

    def elbo(self, batch, tau, rng, prior_scale=0.0, training=True):
        return gmm_elbo(batch.x, self.params, self.net, tau, rng, prior_scale, training)

    def posterior(self, batch):
        return posterior(self.net, batch.x)

    def log_marginal(self, batch):
        return gmm_log_marginal(batch.x, self.params)

    def points(self, batch):
        return batch.x

    def spec(self):
        h = self.params.hyper
        return {
            "kind": self.kind,
            "K": self.K,
            "rank": self.rank,
            "hyper": {"mu": h.mu.tolist(), "cov": h.cov.tolist(), "nu": h.nu, "psi": h.psi.tolist()},
            "net": self.net.config(),
        }


class SpecialPurpose(LatentModel):
    kind = "sp"
    K = SP_Z_CLASSES

    def __init__(
        self,
        n_age,
        n_charge,
        hyper=None,
        rng=None,
        t_mean=0.0,
        t_sd=1.0,
        widths=(64, 32),
        activation="relu",
        dropout=0.1,
        batch_norm=True,
    ):
        net_kwargs = {"widths": widths, "activation": activation, "dropout": dropout, "batch_norm": batch_norm}
        self.n_age, self.n_charge = int(n_age), int(n_charge)
        self.t_mean, self.t_sd = float(t_mean), float(t_sd)
        self.params = SPParams.initialize(
            self.n_age, self.n_charge, hyper, rng, t_mean=t_mean, t_sd=t_sd, **net_kwargs
        )
        self.q_z = InferenceNet(5, SP_Z_CLASSES, rng=rng, name="q_z", **net_kwargs)
        self.q_u = InferenceNet(self.n_age + self.n_charge + 1, SP_U_CLASSES, rng=rng, name="q_u", **net_kwargs)

    @classmethod
    def from_data(cls, data, rng, hyper=None, **net_kwargs):
        t = data.role("t")
        t_mean, t_sd = float(np.mean(t)), float(np.std(t)) or 1.0
        if hyper is None:
            hyper = SPHyper(
                mu_z=(-t_sd, 0.0, t_sd), sigma_z=t_sd, mu_beta0=t_mean, sigma_beta0=10.0 * t_sd
            )
        n_age = len(data.vocab[data.schema.role("a")])
        n_charge = len(data.vocab[data.schema.role("c")])
        return cls(n_age, n_charge, hyper=hyper, rng=rng, t_mean=t_mean, t_sd=t_sd, **net_kwargs)

    def make_batch(self, data):
        xz = np.column_stack([data.role(r) for r in ("m", "f", "p", "d")]).astype(float)
        a = np.asarray(data.role("a"), dtype=np.int64)
        c = np.asarray(data.role("c"), dtype=np.int64)
        t = np.asarray(data.role("t"), dtype=float)
        xu = np.zeros((len(t), self.n_age + self.n_charge))
        xu[np.arange(len(t)), a] = 1.0
        xu[np.arange(len(t)), self.n_age + c] = 1.0
        t_in = ((t - self.t_mean) / self.t_sd).reshape(-1, 1)
        return SPBatch(xz, a, c, t, xu, t_in)

    def parameters(self):
        out = self.params.tensors()
        out.update(self.q_z.params)
        out.update(self.q_u.params)
        return out

    def nets(self):
        return [self.params.prior_net, self.q_z, self.q_u]

    def variational_nets(self):
        return [self.q_z, self.q_u]

    def warm_start_parameters(self):
        out = dict(self.params.prior_net.params)
        out.update({k: v for k, v in self.params.regression_tensors().items() if k in ("sp.beta0", "sp.beta_z", "sp.sigma_t_raw")})
        return out

    def elbo(self, batch, tau, rng, prior_scale=0.0, training=True):
        return sp_elbo(batch, self.params, (self.q_z, self.q_u), tau, rng, prior_scale, training)

    def posterior(self, batch):
        return posterior(self.q_z, batch.qz_input)

    def posterior_u(self, batch):
        return posterior(self.q_u, batch.qu_input)

    def prior_probs(self, batch):
        return posterior(self.params.prior_net, batch.xz)

    def log_marginal(self, batch):
        return sp_log_marginal(batch, self.params)

    def predict(self, batch):
        return sp_predict_jail_time(batch, self.params, (self.q_z, self.q_u))

    def points(self, batch):
        return batch.xz

    def spec(self):
        return {
            "kind": self.kind,
            "n_age": self.n_age,
            "n_charge": self.n_charge,
            "t_mean": self.t_mean,
            "t_sd": self.t_sd,
            "hyper": _jsonable(asdict(self.params.hyper)),
            "net": self.q_z.config(),
        }


MODEL_KINDS = {"nb": NaiveBayes, "gmm": GaussianMixture, "sp": SpecialPurpose}


def build_model(
    kind, data, rng, K=None, rank=None, widths=(64, 32), activation="relu", dropout=0.1, batch_norm=True
):
    """Instantiate a model sized for ``data`` (the training split)."""
    net_kwargs = {"widths": tuple(widths), "activation": activation, "dropout": dropout, "batch_norm": batch_norm}
    if kind == "nb":
        return NaiveBayes.from_data(data, rng, K=K or 2, **net_kwargs)
    if kind == "gmm":
        return GaussianMixture.from_data(data, rng, K=K or 3, rank=rank, **net_kwargs)
    if kind == "sp":
        if K not in (None, SP_Z_CLASSES):
            raise DomainError("the criminal-justice model has exactly three risk classes")
        return SpecialPurpose.from_data(data, rng, **net_kwargs)
    raise DomainError(f"unknown model kind {kind!r}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_from_spec(spec):
    from .distributions import RngStream

    rng = RngStream(0)
    net = spec["net"]
    net_kwargs = {
        "widths": tuple(net["widths"]),
        "activation": net["activation"],
        "dropout": net["dropout"],
        "batch_norm": net["batch_norm"],
    }
    kind = spec["kind"]
    if kind == "nb":
        return NaiveBayes(spec["blocks"], K=spec["K"], hyper=NBHyper(**spec["hyper"]), rng=rng, **net_kwargs)
    if kind == "gmm":
        h = spec["hyper"]
        hyper = GMMHyper(np.array(h["mu"]), np.array(h["cov"]), h["nu"], np.array(h["psi"]))
        return GaussianMixture(hyper, rank=spec["rank"], rng=rng, **net_kwargs)
    if kind == "sp":
        hyper = SPHyper(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec["hyper"].items()})
        return SpecialPurpose(
            spec["n_age"], spec["n_charge"], hyper=hyper, rng=rng, t_mean=spec["t_mean"], t_sd=spec["t_sd"], **net_kwargs
        )
    raise DomainError(f"unknown model kind {kind!r}")


def save_checkpoint(model, path, metadata=None):
    """Write an ``.npz`` mapping parameter name -> array plus a JSON header.

    The header (key ``__meta__``) records the format version, the model
    spec needed to rebuild the architecture, and optional metadata.
    """
    meta = {"format": CHECKPOINT_FORMAT, "spec": model.spec(), "metadata": metadata or {}}
    arrays = model.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format {meta.get('format')!r}")
        state = {k: archive[k] for k in archive.files if k != "__meta__"}
    model = model_from_spec(meta["spec"])
    model.load_state_dict(state)
    return model, meta


__all__ = [
    "InferenceNet",
    "categorical_kl_uniform",
    "ElboTerms",
    "NBHyper",
    "NBParams",
    "nb_elbo",
    "nb_log_marginal",
    "GMMHyper",
    "GMMParams",
    "gmm_elbo",
    "gmm_log_marginal",
    "SPHyper",
    "SPParams",
    "SPBatch",
    "sp_elbo",
    "sp_log_joint_table",
    "sp_log_marginal",
    "sp_warm_start_rows",
    "sp_predict_jail_time",
    "posterior",
    "assign_hard",
    "fair_objective",
    "ArrayBatch",
    "LatentModel",
    "NaiveBayes",
    "GaussianMixture",
    "SpecialPurpose",
    "MODEL_KINDS",
    "build_model",
    "model_from_spec",
    "save_checkpoint",
    "load_checkpoint",
]
