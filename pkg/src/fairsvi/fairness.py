"""Intersectional differential fairness: counting, penalty and audits.

Training uses relaxed responsibilities pushed through exponentially weighted
count tables (:func:`update_counts`), and the differentiable worst-case
log-ratio (:func:`epsilon_df`) feeds a hinge penalty.  Audits work on hard
assignments over a full split.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .distributions import smoothed_group_prob
from .errors import AuditError, DomainError, UnknownCategoryError

DEFAULT_AUDIT_ALPHA = 1.0


@dataclass(frozen=True)
class FairnessConfig:
    """Dirichlet smoothing ``alpha``, target ``eps0`` and trade-off ``lam``."""

    alpha: float = DEFAULT_AUDIT_ALPHA
    eps0: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not self.eps0 >= 0:
            raise DomainError(f"eps0 must be nonnegative, got {self.eps0}")
        if not self.lam >= 0:
            raise DomainError(f"lambda must be nonnegative, got {self.lam}")


class SparsityWarning(UserWarning):
    """An unsmoothed metric hit an empty group or class."""


@dataclass
class GroupIndex:
    """Bijection between protected-attribute tuples and integer group ids.

    Categories keep first-seen order; ids are mixed-radix with the first
    attribute most significant, so ``n_groups`` is the product of the
    per-attribute category counts.
    """

    attributes: list
    categories: list

    @property
    def n_groups(self):
        return int(np.prod([len(c) for c in self.categories]))

    @property
    def radix(self):
        sizes = [len(c) for c in self.categories]
        return np.array([int(np.prod(sizes[i + 1 :])) for i in range(len(sizes))], dtype=np.int64)

    def encode(self, columns):
        """Map protected columns (mapping name -> values) to group ids."""
        missing = [a for a in self.attributes if a not in columns]
        if missing:
            raise AuditError(f"missing protected attributes: {missing}")
        codes = []
        for attr, cats in zip(self.attributes, self.categories):
            lookup = {c: i for i, c in enumerate(cats)}
            values = list(np.asarray(columns[attr], dtype=object))
            try:
                codes.append([lookup[v] for v in values])
            except KeyError as exc:
                raise UnknownCategoryError(
                    f"attribute {attr!r} has unseen category {exc.args[0]!r}"
                ) from None
        return (np.asarray(codes, dtype=np.int64).T * self.radix).sum(axis=1)

    def label(self, group_id):
        out, rest = [], int(group_id)
        for cats, base in zip(self.categories, self.radix):
            out.append(cats[rest // base])
            rest %= base
        return tuple(out)

    def labels(self):
        return [self.label(g) for g in range(self.n_groups)]

    def to_dict(self):
        return {"attributes": list(self.attributes), "categories": [list(c) for c in self.categories]}


def encode_intersections(columns, attributes=None):
    """Assign each individual to an intersectional group.

    Parameters
    ----------
    columns : Mapping[str, sequence]
        Protected attribute values per individual.
    attributes : list of str, optional
        Attribute order; defaults to the mapping's order.

    Returns
    -------
    ids : ndarray of int
    index : GroupIndex
    """
    attributes = list(attributes or columns.keys())
    categories = []
    for attr in attributes:
        seen = {}
        for v in np.asarray(columns[attr], dtype=object):
            if v is None or (isinstance(v, float) and np.isnan(v)):
                raise AuditError(f"missing value for protected attribute {attr!r}")
            seen.setdefault(v, None)
        categories.append(list(seen))
    index = GroupIndex(attributes, categories)
    return index.encode(columns), index


# -- streaming counts ------------------------------------------------------
@dataclass
class CountState:
    """Exponentially weighted expected counts per (group, latent class).

    ``N_zs`` may be a :class:`Tensor` carrying gradient from the latest
    minibatch; ``N_s`` is a plain array.
    """

    N_zs: object
    N_s: np.ndarray
    n: int

    @classmethod
    def zeros(cls, n_groups, K, n):
        return cls(Tensor(np.zeros((n_groups, K))), np.zeros(n_groups), int(n))

    def detached(self):
        return CountState(ad.detach(self.N_zs), self.N_s.copy(), self.n)

    @property
    def table(self):
        return np.asarray(as_tensor(self.N_zs).data)


def batch_counts(responsibilities, group_ids, n_groups):
    """Per-group sums of responsibility rows and per-group member counts."""
    group_ids = np.asarray(group_ids, dtype=np.int64)
    onehot = np.zeros((n_groups, len(group_ids)))
    onehot[group_ids, np.arange(len(group_ids))] = 1.0
    return onehot @ as_tensor(responsibilities), onehot.sum(axis=1)


def update_counts(state, responsibilities, group_ids, rho, n=None):
    """Stochastic count update on a minibatch.

    ``N <- (1 - rho) N + rho (n / m) N_hat`` for both tables.  The stale term
    is detached; the fresh term keeps the gradient path through
    ``responsibilities``.
    """
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"count step size must lie in (0, 1], got {rho}")
    n = state.n if n is None else int(n)
    m = len(group_ids)
    if m < 1:
        raise DomainError("minibatch must contain at least one row")
    n_groups = state.N_s.shape[0]
    N_hat_zs, N_hat_s = batch_counts(responsibilities, group_ids, n_groups)
    scale = rho * n / m
    N_zs = ad.detach(state.N_zs) * (1.0 - rho) + N_hat_zs * scale
    N_s = (1.0 - rho) * state.N_s + scale * N_hat_s
    return CountState(N_zs, N_s, n)


# -- differential fairness ---------------------------------------------------
def _ordered_pairs(groups):
    return [(i, j) for i in groups for j in groups if i != j]


def epsilon_df(N_zs, N_s, alpha=DEFAULT_AUDIT_ALPHA):
    """Worst-case absolute log-ratio of smoothed class rates across groups.

    Only groups with ``N_s > 0`` take part.  The max runs class-major over
    ordered pairs of populated groups sorted by id; the gradient (when
    ``N_zs`` is a Tensor) flows through the first maximizer.

    Returns
    -------
    Tensor
        Scalar epsilon.
    """
    N_zs = as_tensor(N_zs)
    N_s = np.asarray(N_s, float)
    K = N_zs.shape[1]
    populated = np.flatnonzero(N_s > 0)
    if len(populated) < 2:
        raise AuditError("differential fairness needs at least two populated groups")
    probs = smoothed_group_prob(ad.take(N_zs, populated, axis=0), N_s[populated, None], alpha, K)
    log_p = ad.log(probs)  # (G, K)
    pos = {g: i for i, g in enumerate(populated)}
    pairs = _ordered_pairs(populated)
    first = [pos[i] for i, _ in pairs]
    second = [pos[j] for _, j in pairs]
    diff = ad.take(log_p, first, axis=0) - ad.take(log_p, second, axis=0)  # (P, K)
    return diff.transpose().reshape(-1).max()


def fairness_penalty(epsilon, eps0=0.0):
    """Hinge ``max(0, epsilon - eps0)``; flat (zero gradient) below ``eps0``."""
    return ad.relu(as_tensor(epsilon) - eps0)


# -- audits ----------------------------------------------------------------
def hard_counts(assignments, group_ids, n_groups, K):
    table = np.zeros((n_groups, K))
    np.add.at(table, (np.asarray(group_ids), np.asarray(assignments)), 1.0)
    return table, table.sum(axis=1)


def _conditional_rates(assignments, labels, K):
    values = list(dict.fromkeys(np.asarray(labels, dtype=object)))
    rates = np.zeros((len(values), K))
    labels = np.asarray(labels, dtype=object)
    for i, v in enumerate(values):
        member = np.asarray(assignments)[labels == v]
        rates[i] = np.bincount(member, minlength=K)[:K] / len(member)
    return values, rates


def demographic_parity(assignments, labels, K):
    """Max over classes and value pairs of ``|P(z=k|a) - P(z=k|b)|``."""
    _, rates = _conditional_rates(assignments, labels, K)
    return float((rates.max(axis=0) - rates.min(axis=0)).max())


def p_percent_rule(assignments, labels, K):
    """``100 * min`` over classes and value pairs of ``P(z=k|a) / P(z=k|b)``.

    A class that no member of any value receives is skipped; a class with
    zero rate for only some values gives 0 and a :class:`SparsityWarning`.
    """
    _, rates = _conditional_rates(assignments, labels, K)
    worst = 1.0
    for k in range(K):
        hi, lo = rates[:, k].max(), rates[:, k].min()
        if hi == 0:
            warnings.warn(f"class {k} is empty; skipped in p%-rule", SparsityWarning, stacklevel=2)
            continue
        if lo == 0:
            warnings.warn(f"class {k} has a zero rate for some group", SparsityWarning, stacklevel=2)
        worst = min(worst, lo / hi)
    return 100.0 * worst


def subgroup_fairness(assignments, group_ids, K):
    """Max over groups g and classes k of ``P(g) |P(z=k) - P(z=k|g)|``."""
    assignments = np.asarray(assignments)
    group_ids = np.asarray(group_ids)
    n = len(assignments)
    overall = np.bincount(assignments, minlength=K)[:K] / n
    worst = 0.0
    for g in np.unique(group_ids):
        member = assignments[group_ids == g]
        rate = np.bincount(member, minlength=K)[:K] / len(member)
        worst = max(worst, len(member) / n * np.abs(overall - rate).max())
    return float(worst)


@dataclass
class AuditReport:
    """Fairness metrics for one set of hard assignments."""

    epsilon_df: float
    gamma_sf: float
    delta_dp: dict
    p_rule: dict
    epsilon_df_marginal: dict
    alpha: float
    K: int
    n: int
    groups: dict = field(default_factory=dict)

    @property
    def delta_dp_overall(self):
        return float(np.mean(list(self.delta_dp.values())))

    def to_dict(self):
        return {
            "epsilon_df": self.epsilon_df,
            "gamma_sf": self.gamma_sf,
            "delta_dp": dict(self.delta_dp),
            "delta_dp_overall": self.delta_dp_overall,
            "p_rule": dict(self.p_rule),
            "epsilon_df_marginal": dict(self.epsilon_df_marginal),
            "alpha": self.alpha,
            "K": self.K,
            "n": self.n,
            "groups": self.groups,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), indent=kwargs.pop("indent", 2), **kwargs)


def audit_metrics(assignments, protected, K, alpha=DEFAULT_AUDIT_ALPHA, index=None):
    """Full fairness audit of hard class assignments.

    Parameters
    ----------
    assignments : array of int, shape (n,)
    protected : Mapping[str, sequence]
        Protected attribute values per individual.
    K : int
        Number of latent classes.
    alpha : float
        Dirichlet smoothing for the epsilon-DF estimates.
    index : GroupIndex, optional
        Reuse a training-time group index; unseen categories then raise.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.min() < 0 or assignments.max() >= K:
        raise AuditError(f"assignments must be class ids in [0, {K})")
    if index is None:
        ids, index = encode_intersections(protected)
    else:
        ids = index.encode(protected)
    table, sizes = hard_counts(assignments, ids, index.n_groups, K)
    eps = epsilon_df(table, sizes, alpha).item()
    marginal, dp, prule = {}, {}, {}
    for attr in index.attributes:
        sub_ids, sub_index = encode_intersections({attr: protected[attr]})
        t, s = hard_counts(assignments, sub_ids, sub_index.n_groups, K)
        marginal[attr] = epsilon_df(t, s, alpha).item() if (s > 0).sum() >= 2 else 0.0
        dp[attr] = demographic_parity(assignments, protected[attr], K)
        prule[attr] = p_percent_rule(assignments, protected[attr], K)
    groups = {
        "|".join(map(str, index.label(g))): [int(c) for c in table[g]]
        for g in range(index.n_groups)
        if sizes[g] > 0
    }
    return AuditReport(
        epsilon_df=eps,
        gamma_sf=subgroup_fairness(assignments, ids, K),
        delta_dp=dp,
        p_rule=prule,
        epsilon_df_marginal=marginal,
        alpha=alpha,
        K=K,
        n=len(assignments),
        groups=groups,
    )


__all__ = [
    "FairnessConfig",
    "GroupIndex",
    "encode_intersections",
    "CountState",
    "batch_counts",
    "update_counts",
    "epsilon_df",
    "fairness_penalty",
    "hard_counts",
    "demographic_parity",
    "p_percent_rule",
    "subgroup_fairness",
    "AuditReport",
    "audit_metrics",
    "SparsityWarning",
    "DEFAULT_AUDIT_ALPHA",
]
