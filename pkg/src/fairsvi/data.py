"""Tabular ingestion, train-only encoding, splitting and synthetic generators.

A :class:`DatasetSchema` is an INI file with one ``[column:<name>]`` section
per used column::

    [dataset]
    name = compas

    [column:race]
    kind = protected

    [column:age]
    kind = protected
    bins = 25, 46
    labels = <25, 25-45, >45

    [column:priors_count]
    kind = continuous
    role = p

    [column:jail_days]
    kind = target
    transform = log1p
    role = t

``kind`` is one of ``categorical``, ``continuous``, ``protected``, ``target``
or ``auxiliary`` (kept for evaluation only).  Columns absent from the schema
are ignored.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, SchemaError

KINDS = ("categorical", "continuous", "protected", "target", "auxiliary")
SP_ROLES = ("m", "f", "p", "d", "a", "c", "t")
TRANSFORMS = {
    None: (lambda v: v, lambda v: v),
    "log1p": (np.log1p, np.expm1),
}


def _split_list(text):
    return [item.strip() for item in text.split(",") if item.strip()] if text else None


@dataclass
class ColumnSpec:
    name: str
    kind: str
    vocabulary: list | None = None
    bins: list | None = None
    labels: list | None = None
    transform: str | None = None
    role: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.transform not in TRANSFORMS:
            raise SchemaError(f"column {self.name!r}: unknown transform {self.transform!r}")
        if self.bins is not None:
            labels = self.labels or [f"bin{i}" for i in range(len(self.bins) + 1)]
            if len(labels) != len(self.bins) + 1:
                raise SchemaError(f"column {self.name!r}: need len(bins) + 1 labels")
            if list(self.bins) != sorted(self.bins):
                raise SchemaError(f"column {self.name!r}: bin edges must increase")
            self.labels = labels

    @property
    def is_discrete(self):
        return self.kind in ("categorical", "protected", "auxiliary")

    def bucket(self, values):
        """Map numeric values to band labels; intervals are ``[lo, hi)``."""
        idx = np.digitize(np.asarray(values, float), self.bins, right=False)
        return np.asarray(self.labels, dtype=object)[idx]


@dataclass
class DatasetSchema:
    """Column roles for one dataset."""

    columns: list
    name: str = "dataset"

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        if not self.of_kind("protected"):
            raise SchemaError("schema needs at least one protected column")

    def __getitem__(self, name):
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(name)

    def of_kind(self, kind):
        return [c for c in self.columns if c.kind == kind]

    def names(self, kind):
        return [c.name for c in self.of_kind(kind)]

    def role(self, role):
        for col in self.columns:
            if col.role == role:
                return col.name
        raise SchemaError(f"no column has role {role!r}")

    # -- config round-trip ----------------------------------------------
    @classmethod
    def from_string(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        name = parser.get("dataset", "name", fallback="dataset")
        columns = []
        for section in parser.sections():
            if not section.startswith("column:"):
                continue
            sec = parser[section]
            if "kind" not in sec:
                raise SchemaError(f"[{section}] lacks a kind")
            bins = _split_list(sec.get("bins"))
            try:
                bins = [float(b) for b in bins] if bins else None
            except ValueError as exc:
                raise SchemaError(f"[{section}] has non-numeric bins") from exc
            columns.append(
                ColumnSpec(
                    name=section.split(":", 1)[1].strip(),
                    kind=sec["kind"].strip(),
                    vocabulary=_split_list(sec.get("vocabulary")),
                    bins=bins,
                    labels=_split_list(sec.get("labels")),
                    transform=sec.get("transform") or None,
                    role=sec.get("role") or None,
                )
            )
        if not columns:
            raise SchemaError("schema defines no columns")
        return cls(columns, name=name)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_string(fh.read())
        except FileNotFoundError:
            raise SchemaError(f"schema file not found: {path}") from None

    def to_string(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser["dataset"] = {"name": self.name}
        for col in self.columns:
            sec = {"kind": col.kind}
            if col.vocabulary:
                sec["vocabulary"] = ", ".join(map(str, col.vocabulary))
            if col.bins is not None:
                sec["bins"] = ", ".join(f"{b:g}" for b in col.bins)
                sec["labels"] = ", ".join(col.labels)
            if col.transform:
                sec["transform"] = col.transform
            if col.role:
                sec["role"] = col.role
            parser[f"column:{col.name}"] = sec
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_string())


@dataclass
class SplitSpec:
    """Train/dev/test fractions and the shuffle seed."""

    train: float = 0.6
    dev: float = 0.2
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.dev, self.test)
        if min(fr) < 0 or not np.isclose(sum(fr), 1.0):
            raise SchemaError(f"split fractions must be nonnegative and sum to 1, got {fr}")


def split(n, spec):
    """Shuffle ``range(n)`` and cut it into disjoint train/dev/test indices."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = rng.permutation(n)
    n_dev = int(round(spec.dev * n))
    n_test = int(round(spec.test * n))
    n_train = n - n_dev - n_test
    return (
        np.sort(order[:n_train]),
        np.sort(order[n_train : n_train + n_dev]),
        np.sort(order[n_train + n_dev :]),
    )


@dataclass
class LoadReport:
    n_read: int
    n_dropped: int
    dropped_rows: list = field(default_factory=list)


def read_table(path, schema):
    """Read a comma-delimited UTF-8 file and validate it against ``schema``.

    Rows with an empty cell in any schema column are dropped and reported.
    Non-numeric cells in numeric columns raise :class:`DataError` listing
    every offending ``(row, column, cell)``.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    return validate_frame(frame, schema)


def validate_frame(frame, schema):
    missing = [c.name for c in schema.columns if c.name not in frame.columns]
    if missing:
        raise SchemaError(f"columns missing from data: {missing}")
    frame = frame[[c.name for c in schema.columns]].astype(str)
    frame = frame.apply(lambda s: s.str.strip())
    empty = (frame == "").any(axis=1) | (frame.isin(["nan", "NaN", "None"])).any(axis=1)
    dropped = [int(i) + 2 for i in np.flatnonzero(empty.to_numpy())]  # 1-based + header
    frame = frame.loc[~empty].reset_index(drop=True)
    bad = []
    for col in schema.columns:
        if col.kind in ("continuous", "target") or col.bins is not None:
            parsed = pd.to_numeric(frame[col.name], errors="coerce")
            for i in np.flatnonzero(parsed.isna().to_numpy()):
                bad.append((int(i), col.name, frame[col.name].iloc[i]))
    if bad:
        raise DataError(f"{len(bad)} unparseable numeric cells", rows=bad)
    report = LoadReport(n_read=len(frame) + len(dropped), n_dropped=len(dropped), dropped_rows=dropped)
    return frame, report


@dataclass
class EncodedData:
    """One encoded split; arrays are aligned row-wise."""

    schema: DatasetSchema
    categorical: dict
    vocab: dict
    continuous: dict
    protected: dict
    target: dict
    auxiliary: dict

    def __len__(self):
        for group in (self.protected, self.categorical, self.continuous, self.target):
            for values in group.values():
                return len(values)
        return 0

    def onehot(self, names=None):
        """One-hot matrix of categorical columns and their column blocks."""
        names = list(self.categorical) if names is None else list(names)
        blocks, parts, start = [], [], 0
        for name in names:
            width = len(self.vocab[name])
            block = np.zeros((len(self), width))
            block[np.arange(len(self)), self.categorical[name]] = 1.0
            parts.append(block)
            blocks.append((name, start, start + width))
            start += width
        X = np.concatenate(parts, axis=1) if parts else np.zeros((len(self), 0))
        return X, blocks

    def continuous_matrix(self, names=None):
        names = list(self.continuous) if names is None else list(names)
        return np.column_stack([self.continuous[n] for n in names]) if names else np.zeros((len(self), 0))

    def column(self, name):
        for group in (self.continuous, self.categorical, self.target, self.protected, self.auxiliary):
            if name in group:
                return group[name]
        raise KeyError(name)

    def role(self, role):
        return self.column(self.schema.role(role))

    def subset(self, idx):
        pick = lambda d: {k: v[idx] for k, v in d.items()}  # noqa: E731
        return replace(
            self,
            categorical=pick(self.categorical),
            continuous=pick(self.continuous),
            protected=pick(self.protected),
            target=pick(self.target),
            auxiliary=pick(self.auxiliary),
        )


class Encoder:
    """Categorical vocabularies and standardization fitted on train rows only."""

    def __init__(self, schema):
        self.schema = schema
        self.vocab = {}
        self.mean = {}
        self.std = {}

    def fit(self, frame):
        for col in self.schema.columns:
            values = frame[col.name]
            if col.kind == "categorical":
                self.vocab[col.name] = list(col.vocabulary) if col.vocabulary else sorted(values.unique())
            elif col.kind == "continuous":
                x = values.astype(float).to_numpy()
                sd = x.std()
                self.mean[col.name] = float(x.mean())
                self.std[col.name] = float(sd) if sd > 0 else 1.0
        return self

    def transform(self, frame):
        cat, cont, prot, target, aux = {}, {}, {}, {}, {}
        for col in self.schema.columns:
            values = frame[col.name]
            if col.kind == "categorical":
                lookup = {v: i for i, v in enumerate(self.vocab[col.name])}
                unknown = sorted(set(values) - set(lookup))
                if unknown:
                    raise DataError(f"column {col.name!r} has values outside its vocabulary: {unknown}")
                cat[col.name] = values.map(lookup).to_numpy(dtype=np.int64)
            elif col.kind == "continuous":
                x = values.astype(float).to_numpy()
                cont[col.name] = (x - self.mean[col.name]) / self.std[col.name]
            elif col.kind == "protected":
                if col.bins is not None:
                    prot[col.name] = col.bucket(values.astype(float))
                else:
                    prot[col.name] = values.to_numpy(dtype=object)
            elif col.kind == "target":
                forward, _ = TRANSFORMS[col.transform]
                target[col.name] = forward(values.astype(float).to_numpy())
            else:
                aux[col.name] = values.to_numpy(dtype=object)
        return EncodedData(self.schema, cat, dict(self.vocab), cont, prot, target, aux)

    def decode(self, name, codes):
        return [self.vocab[name][i] for i in codes]

    def inverse_target(self, name, values):
        _, inverse = TRANSFORMS[self.schema[name].transform]
        return inverse(np.asarray(values, float))


@dataclass
class DatasetSplits:
    train: EncodedData
    dev: EncodedData
    test: EncodedData
    encoder: Encoder
    report: LoadReport | None = None


def encode_frame(frame, schema, spec=None):
    """Split a validated frame and encode every split with train statistics."""
    spec = spec or SplitSpec()
    tr, dv, te = split(len(frame), spec)
    encoder = Encoder(schema).fit(frame.iloc[tr])
    return DatasetSplits(
        encoder.transform(frame.iloc[tr]),
        encoder.transform(frame.iloc[dv]),
        encoder.transform(frame.iloc[te]),
        encoder,
    )


def load_dataset(path, schema, spec=None):
    """Read, validate, split and encode a delimited file."""
    if not isinstance(schema, DatasetSchema):
        schema = DatasetSchema.from_file(schema)
    frame, report = read_table(path, schema)
    splits = encode_frame(frame, schema, spec)
    splits.report = report
    return splits


# -- synthetic generators ----------------------------------------------------
DEFAULT_PROTECTED = {"gender": ["F", "M"], "race": ["A", "B"]}


def skewed_group_priors(n_groups, K, skew):
    """Group-dependent class priors: group g leans toward class ``g mod K``."""
    if not 0.0 <= skew < 1.0:
        raise ValueError("skew must lie in [0, 1)")
    priors = np.full((n_groups, K), (1.0 - skew) / K)
    priors[np.arange(n_groups), np.arange(n_groups) % K] += skew
    return priors


def generating_epsilon(priors):
    """Worst absolute log-ratio of class probabilities between groups."""
    log_p = np.log(np.asarray(priors, float))
    return float((log_p.max(axis=0) - log_p.min(axis=0)).max())


def _draw_protected(n, protected, rng):
    names = list(protected)
    sizes = [len(protected[a]) for a in names]
    codes = np.column_stack([rng.integers(0, s, size=n) for s in sizes])
    radix = np.array([int(np.prod(sizes[i + 1 :])) for i in range(len(sizes))])
    group = (codes * radix).sum(axis=1)
    columns = {a: np.asarray(protected[a], dtype=object)[codes[:, i]] for i, a in enumerate(names)}
    return columns, group, int(np.prod(sizes))


def _draw_classes(group, priors, rng):
    u = rng.uniform(size=len(group))
    cdf = np.cumsum(priors[group], axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), priors.shape[1] - 1)


@dataclass
class GroundTruth:
    z: np.ndarray
    epsilon_df: float
    params: dict = field(default_factory=dict)
    u: np.ndarray | None = None


def synth_nb(
    n,
    K=2,
    n_attributes=4,
    n_categories=4,
    protected=None,
    group_priors=None,
    skew=0.0,
    concentration=0.5,
    rng=None,
):
    """Categorical naive Bayes data with group-dependent class priors.

    Returns
    -------
    frame : DataFrame
    schema : DatasetSchema
    truth : GroundTruth
        True classes, class-conditional category probabilities and the
        generating epsilon-DF of the group priors.
    """
    protected = protected or DEFAULT_PROTECTED
    columns, group, n_groups = _draw_protected(n, protected, rng)
    priors = (
        np.asarray(group_priors, float)
        if group_priors is not None
        else skewed_group_priors(n_groups, K, skew)
    )
    if priors.shape != (n_groups, K):
        raise ValueError(f"group priors must have shape {(n_groups, K)}")
    z = _draw_classes(group, priors, rng)
    theta = rng.dirichlet(np.full(n_categories, concentration), size=(K, n_attributes))
    frame = pd.DataFrame(columns)
    specs = [ColumnSpec(a, "protected") for a in protected]
    labels = np.array([f"c{v}" for v in range(n_categories)], dtype=object)
    for d in range(n_attributes):
        cdf = np.cumsum(theta[z, d], axis=1)
        draw = np.minimum((rng.uniform(size=n)[:, None] > cdf).sum(axis=1), n_categories - 1)
        frame[f"x{d}"] = labels[draw]
        specs.append(ColumnSpec(f"x{d}", "categorical", vocabulary=list(labels)))
    truth = GroundTruth(z=z, epsilon_df=generating_epsilon(priors), params={"theta": theta, "priors": priors})
    return frame, DatasetSchema(specs, name="synthetic-nb"), truth


def synth_gmm(n, K=3, D=2, separation=4.0, protected=None, group_priors=None, skew=0.0, rng=None):
    """Gaussian clusters along a random direction, ``separation`` noise s.d. apart."""
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    protected = protected or DEFAULT_PROTECTED
    columns, group, n_groups = _draw_protected(n, protected, rng)
    priors = (
        np.asarray(group_priors, float)
        if group_priors is not None
        else skewed_group_priors(n_groups, K, skew)
    )
    z = _draw_classes(group, priors, rng)
    direction = rng.normal(size=D)
    direction /= np.linalg.norm(direction)
    means = np.outer(np.arange(K) * separation, direction)
    X = means[z] + rng.normal(size=(n, D))
    frame = pd.DataFrame(columns)
    specs = [ColumnSpec(a, "protected") for a in protected]
    for d in range(D):
        frame[f"v{d}"] = X[:, d]
        specs.append(ColumnSpec(f"v{d}", "continuous"))
    truth = GroundTruth(z=z, epsilon_df=generating_epsilon(priors), params={"means": means, "priors": priors})
    return frame, DatasetSchema(specs, name="synthetic-gmm"), truth


@dataclass
class SPCoefficients:
    """Generating process for the criminal-justice model (log-days scale)."""

    beta0: float = 2.5
    beta_z: tuple = (0.0, 1.0, 2.0)
    beta_u: tuple = (0.0, 0.5)
    beta_c: tuple = (0.0, 0.4)
    sigma: float = 0.5
    race_bias: float = 1.0
    age_given_u: tuple = ((0.2, 0.5, 0.3), (0.5, 0.4, 0.1))
    charge_given_u: tuple = ((0.6, 0.4), (0.35, 0.65))
    thresholds: tuple = (-0.45, 0.45)


SP_COLUMNS = {
    "m": "juv_misd_count",
    "f": "juv_fel_count",
    "p": "priors_count",
    "d": "decile_score",
    "a": "age_cat",
    "c": "c_charge_degree",
    "t": "jail_days",
}


def sp_schema():
    specs = [
        ColumnSpec("race", "protected"),
        ColumnSpec("sex", "protected"),
        ColumnSpec(SP_COLUMNS["m"], "continuous", role="m"),
        ColumnSpec(SP_COLUMNS["f"], "continuous", role="f"),
        ColumnSpec(SP_COLUMNS["p"], "continuous", role="p"),
        ColumnSpec(SP_COLUMNS["d"], "continuous", role="d"),
        ColumnSpec(SP_COLUMNS["a"], "categorical", vocabulary=["<25", "25-45", ">45"], role="a"),
        ColumnSpec(SP_COLUMNS["c"], "categorical", vocabulary=["F", "M"], role="c"),
        ColumnSpec(SP_COLUMNS["t"], "target", transform="log1p", role="t"),
        ColumnSpec("two_year_recid", "auxiliary"),
    ]
    return DatasetSchema(specs, name="compas")


def synth_sp(n, coefficients=None, rng=None):
    """Forward-sample the criminal-justice DAG.

    Criminal history depends on a latent propensity shifted by race; risk
    class ``z`` is a fixed threshold map of that history; ``u`` drives age
    band and charge degree; log jail days follow the regression.
    """
    co = coefficients or SPCoefficients()
    race = np.where(rng.uniform(size=n) < 0.5, "African-American", "Caucasian").astype(object)
    sex = np.where(rng.uniform(size=n) < 0.5, "Male", "Female").astype(object)
    h = rng.normal(size=n) + co.race_bias * (race == "African-American") - 0.5 * co.race_bias
    priors = rng.poisson(np.exp(0.8 + 0.7 * h))
    misd = rng.poisson(np.exp(-1.5 + 0.5 * h))
    fel = rng.poisson(np.exp(-2.0 + 0.5 * h))
    decile = np.clip(np.round(5.5 + 1.8 * h + rng.normal(size=n)), 1, 10)
    score = (
        0.6 * np.log1p(priors) + 0.3 * np.log1p(misd) + 0.3 * np.log1p(fel) + 0.12 * decile
    )
    score = (score - 1.5) / 0.6
    z = np.digitize(score, co.thresholds)
    u = (rng.uniform(size=n) < 0.5).astype(int)
    age_p = np.asarray(co.age_given_u)[u]
    age = np.minimum((rng.uniform(size=n)[:, None] > np.cumsum(age_p, axis=1)).sum(axis=1), 2)
    ch_p = np.asarray(co.charge_given_u)[u]
    charge = np.minimum((rng.uniform(size=n)[:, None] > np.cumsum(ch_p, axis=1)).sum(axis=1), 1)
    t = (
        co.beta0
        + np.asarray(co.beta_z)[z]
        + np.asarray(co.beta_u)[u]
        + np.asarray(co.beta_c)[charge]
        + co.sigma * rng.normal(size=n)
    )
    t = np.maximum(t, 0.0)
    recid = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(1.2 - 0.9 * z))).astype(int)
    frame = pd.DataFrame(
        {
            "race": race,
            "sex": sex,
            SP_COLUMNS["m"]: misd,
            SP_COLUMNS["f"]: fel,
            SP_COLUMNS["p"]: priors,
            SP_COLUMNS["d"]: decile.astype(int),
            SP_COLUMNS["a"]: np.array(["<25", "25-45", ">45"], dtype=object)[age],
            SP_COLUMNS["c"]: np.array(["F", "M"], dtype=object)[charge],
            SP_COLUMNS["t"]: np.expm1(t),
            "two_year_recid": recid,
        }
    )
    group = (race == "African-American").astype(int) * 2 + (sex == "Male").astype(int)
    rates = np.array([np.bincount(z[group == g], minlength=3) / max((group == g).sum(), 1) for g in range(4)])
    eps = generating_epsilon(np.clip(rates, 1e-12, None)) if np.all(rates > 0) else float("inf")
    truth = GroundTruth(
        z=z,
        u=u,
        epsilon_df=eps,
        params={"coefficients": co, "log_days": t},
    )
    return frame, sp_schema(), truth


def kmeans(X, K, rng, n_iter=50):
    """Lloyd's algorithm from ``K`` distinct seed rows, fixed iteration count.

    Returns
    -------
    centers : (K, D) array
    labels : (n,) int array
    """
    X = np.asarray(X, float)
    centers = X[rng.choice(len(X), size=K, replace=False)].copy()
    labels = np.zeros(len(X), dtype=np.int64)
    for _ in range(n_iter):
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for k in range(K):
            members = X[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return centers, labels


__all__ = [
    "ColumnSpec",
    "DatasetSchema",
    "SplitSpec",
    "split",
    "read_table",
    "validate_frame",
    "EncodedData",
    "Encoder",
    "DatasetSplits",
    "encode_frame",
    "load_dataset",
    "LoadReport",
    "skewed_group_priors",
    "generating_epsilon",
    "GroundTruth",
    "synth_nb",
    "synth_gmm",
    "SPCoefficients",
    "synth_sp",
    "sp_schema",
    "SP_COLUMNS",
    "kmeans",
]
