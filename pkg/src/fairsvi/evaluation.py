"""Held-out likelihood, clustering indices, regression scores and reports.

All functions here are pure given frozen inputs.  Held-out log-likelihood
is exact: discrete latent configurations are enumerated rather than
estimated.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np

from .errors import DimensionError, MetricError
from .fairness import audit_metrics

CH_SENTINEL = 1e12
NOT_APPLICABLE = "n/a"
MI_BINS = 10


def heldout_ll(model, batch):
    """Average exact log marginal likelihood per row."""
    return float(np.mean(model.log_marginal(batch)))


# -- mutual information ------------------------------------------------------
def quantile_bins(values, n_bins=MI_BINS):
    """Codes in ``[0, n_bins)`` from empirical quantile edges (ties merge bins)."""
    values = np.asarray(values, float)
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(np.unique(edges), values, side="right")


def discrete_mutual_information(a, b):
    """Plug-in mutual information (nats) between two discrete sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError("mutual information needs sequences of equal length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max(0.0, (joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum()))


def mutual_information(assignments, variables, n_bins=MI_BINS):
    """Average MI between ``assignments`` and each observed variable.

    Parameters
    ----------
    assignments : array of int
    variables : Mapping[str, array]
        Observed columns.  Floating-point columns are quantile-binned into
        ``n_bins`` bins; everything else is treated as categorical.

    Returns
    -------
    mean : float
    per_variable : dict
    """
    per = {}
    for name, values in variables.items():
        values = np.asarray(values)
        if values.dtype.kind == "f":
            values = quantile_bins(values, n_bins)
        per[name] = discrete_mutual_information(assignments, values)
    if not per:
        raise MetricError("mutual information needs at least one observed variable")
    return float(np.mean(list(per.values()))), per


def observed_variables(data):
    """Observed columns of an encoded split, keyed by column name."""
    out = {}
    out.update(data.categorical)
    out.update({k: np.asarray(v, float) for k, v in data.continuous.items()})
    out.update({k: np.asarray(v, float) for k, v in data.target.items()})
    return out


# -- clustering indices ------------------------------------------------------
def _clusters(points, assignments):
    points = np.asarray(points, float)
    if points.ndim == 1:
        points = points[:, None]
    assignments = np.asarray(assignments)
    if len(points) != len(assignments):
        raise DimensionError("points and assignments differ in length")
    labels = np.unique(assignments)
    if len(labels) < 2:
        raise MetricError("clustering indices need at least two nonempty clusters")
    return points, assignments, labels


def calinski_harabasz(points, assignments, n_clusters=None):
    """Between- over within-cluster dispersion ratio.

    Returns ``CH_SENTINEL`` when the within-cluster dispersion is zero.  If
    ``n_clusters`` is given, classes in ``range(n_clusters)`` that received no
    points raise :class:`MetricError` naming the empty cluster.
    """
    points, assignments, labels = _clusters(points, assignments)
    _check_empty(labels, n_clusters)
    n, K = len(points), len(labels)
    centre = points.mean(axis=0)
    between = within = 0.0
    for k in labels:
        members = points[assignments == k]
        c = members.mean(axis=0)
        between += len(members) * float(((c - centre) ** 2).sum())
        within += float(((members - c) ** 2).sum())
    if within == 0.0:
        return CH_SENTINEL
    if n == K:
        raise MetricError("Calinski-Harabasz needs more points than clusters")
    return (between / (K - 1)) / (within / (n - K))


def davies_bouldin(points, assignments, n_clusters=None):
    """Mean over clusters of the worst ``(s_i + s_j) / d(c_i, c_j)``."""
    points, assignments, labels = _clusters(points, assignments)
    _check_empty(labels, n_clusters)
    centres = np.array([points[assignments == k].mean(axis=0) for k in labels])
    scatter = np.array(
        [np.linalg.norm(points[assignments == k] - centres[i], axis=1).mean() for i, k in enumerate(labels)]
    )
    worst = []
    for i in range(len(labels)):
        ratios = []
        for j in range(len(labels)):
            if i == j:
                continue
            d = float(np.linalg.norm(centres[i] - centres[j]))
            s = scatter[i] + scatter[j]
            ratios.append(0.0 if s == 0.0 else (math.inf if d == 0.0 else s / d))
        worst.append(max(ratios))
    return float(np.mean(worst))


def _check_empty(labels, n_clusters):
    if n_clusters is None:
        return
    missing = sorted(set(range(n_clusters)) - set(int(k) for k in labels))
    if missing:
        raise MetricError(f"cluster {missing[0]} is empty")


# -- regression --------------------------------------------------------------
def regression_metrics(predicted, observed):
    """MAE, MSE and R^2; R^2 is ``"n/a"`` for zero-variance observations."""
    predicted = np.asarray(predicted, float)
    observed = np.asarray(observed, float)
    if predicted.shape != observed.shape:
        raise DimensionError("predictions and observations differ in shape")
    resid = observed - predicted
    mae = float(np.abs(resid).mean())
    mse = float((resid**2).mean())
    ss_tot = float(((observed - observed.mean()) ** 2).sum())
    r2 = NOT_APPLICABLE if ss_tot == 0.0 else 1.0 - float((resid**2).sum()) / ss_tot
    return {"mae": mae, "mse": mse, "r2": r2}


def grouped_means(values, protected):
    """Average of ``values`` for every observed intersection of protected values."""
    names = list(protected)
    keys = list(zip(*(np.asarray(protected[a], dtype=object) for a in names)))
    out = {}
    for key in sorted(set(keys), key=lambda t: tuple(map(str, t))):
        mask = np.array([k == key for k in keys])
        out["|".join(map(str, key))] = float(np.mean(np.asarray(values)[mask]))
    return out


# -- reports -----------------------------------------------------------------
REPORT_COLUMNS = [
    "model",
    "split",
    "ll",
    "mi",
    "ch",
    "db",
    "mae",
    "mse",
    "r2",
    "epsilon_df",
    "gamma_sf",
]


@dataclass
class EvalReport:
    """Metric values for one model on one split.

    ``metrics`` maps metric name to value or ``"n/a"``; per-attribute
    fairness metrics appear as ``delta_dp[attr]`` and ``p_rule[attr]``.
    """

    model: str
    metrics: dict
    metadata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def columns(self):
        attrs = sorted(k for k in self.metrics if k.startswith(("delta_dp[", "p_rule[")))
        return REPORT_COLUMNS + attrs

    def row(self):
        values = {"model": self.model, "split": self.metadata.get("split", "")}
        values.update(self.metrics)
        return {c: values.get(c, NOT_APPLICABLE) for c in self.columns()}

    def to_dict(self):
        return {"model": self.model, "metrics": self.metrics, "metadata": self.metadata, "extras": self.extras}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.row())
        return buf.getvalue()

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                fh.write(self.to_csv())


def config_hash(config):
    if is_dataclass(config):
        config = asdict(config)
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def assemble_report(model, data, model_id=None, index=None, alpha=1.0, metadata=None):
    """Evaluate ``model`` on one encoded split.

    Parameters
    ----------
    model : LatentModel
    data : EncodedData
    model_id : str, optional
        Row label, e.g. ``"DF-NB"``.
    index : GroupIndex, optional
        Training-time intersection index for the fairness audit.
    """
    batch = model.make_batch(data)
    z = model.assignments(batch)
    K = model.K
    metrics = {"ll": heldout_ll(model, batch)}
    metrics["mi"], mi_per = mutual_information(z, observed_variables(data))
    points = model.points(batch)
    try:
        metrics["ch"] = calinski_harabasz(points, z)
        metrics["db"] = davies_bouldin(points, z)
    except MetricError:
        metrics["ch"] = metrics["db"] = NOT_APPLICABLE
    extras = {"mi_per_variable": mi_per, "ch_sentinel": metrics["ch"] == CH_SENTINEL}
    if model.kind == "sp":
        predicted = model.predict(batch)
        metrics.update(regression_metrics(predicted, batch.t))
        extras["jail_time_by_group"] = grouped_means(predicted, data.protected)
        extras["observed_jail_time_by_group"] = grouped_means(batch.t, data.protected)
        recid = data.auxiliary.get("two_year_recid")
        if recid is not None:
            extras["mi_recidivism"] = discrete_mutual_information(z, np.asarray(recid).astype(str))
    else:
        metrics.update({"mae": NOT_APPLICABLE, "mse": NOT_APPLICABLE, "r2": NOT_APPLICABLE})
    audit = audit_metrics(z, data.protected, K, alpha=alpha, index=index)
    metrics["epsilon_df"] = audit.epsilon_df
    metrics["gamma_sf"] = audit.gamma_sf
    metrics["delta_dp_overall"] = audit.delta_dp_overall
    for attr, value in audit.delta_dp.items():
        metrics[f"delta_dp[{attr}]"] = value
    for attr, value in audit.p_rule.items():
        metrics[f"p_rule[{attr}]"] = value
    extras["audit"] = audit.to_dict()
    return EvalReport(model_id or model.kind, metrics, dict(metadata or {}), extras)


__all__ = [
    "CH_SENTINEL",
    "NOT_APPLICABLE",
    "heldout_ll",
    "quantile_bins",
    "discrete_mutual_information",
    "mutual_information",
    "observed_variables",
    "calinski_harabasz",
    "davies_bouldin",
    "regression_metrics",
    "grouped_means",
    "EvalReport",
    "config_hash",
    "assemble_report",
]
