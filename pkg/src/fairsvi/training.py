"""Stochastic variational inference with an intersectional fairness penalty.

One trial is fully determined by ``(seed, config, data)``: a single
:class:`RngStream` seeded from ``config.seed`` initializes the model and
then drives minibatch shuffling, dropout and every reparameterized draw.

Every run keeps the streaming count tables up to date.  A DF run with
``lam > 0`` adds the hinge penalty to the objective; with ``lam == 0`` the
penalty is left out of the graph, so vanilla and zero-weight DF runs follow
the same parameter trajectory bit for bit.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step
from .distributions import RngStream
from .errors import AuditError, DomainError, TrainingDivergence
from .evaluation import config_hash, heldout_ll
from .fairness import CountState, encode_intersections, epsilon_df, fairness_penalty, update_counts, audit_metrics
from .models import build_model, fair_objective, sp_warm_start_rows

TABLE5_WIDTHS = ((64, 64), (64, 32), (32, 16))
TABLE5_BATCH_SIZES = (128, 256)
TABLE5_LEARNING_RATES = (0.001, 0.002, 0.005)
TABLE5_DROPOUT = (0.1, 0.25)
TABLE5_ACTIVATIONS = ("relu", "softplus")
TABLE5_L2 = (1e-3, 1e-4)
TABLE5_LAMBDAS = (
    0.1, 0.2, 0.5, 0.8, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 1.5, 2.5,
    3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5, 10.0, 15.0, 20.0, 25.0, 30.0, 50.0, 75.0, 100.0,
)  # fmt: skip
COLLAPSE_THRESHOLD = 0.98


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one trial.

    ``fair`` marks a DF run; ``lam``, ``eps0`` and ``alpha`` configure its
    penalty.  ``tau0``, ``tau_min`` and ``tau_rate`` define the temperature
    schedule.  ``warm_start_epochs`` applies to the criminal-justice model
    only and is skipped when ``warm_start`` is false.
    """

    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    rho_t: float = 0.1
    fair: bool = False
    lam: float = 0.0
    eps0: float = 0.0
    alpha: float = 1.0
    tau0: float = 1.0
    tau_min: float = 0.5
    tau_rate: float = 3e-5
    dropout: float = 0.1
    activation: str = "relu"
    widths: tuple = (64, 32)
    batch_norm: bool = True
    l2: float = 0.0
    seed: int = 0
    slack: float = 0.02
    K: int | None = None
    rank: int | None = None
    warm_start: bool = True
    warm_start_epochs: int = 10
    warm_start_lr: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("minibatch size must be at least 1")
        if not 0.0 < self.rho_t <= 1.0:
            raise DomainError(f"count step size must lie in (0, 1], got {self.rho_t}")
        if not self.tau0 >= self.tau_min > 0:
            raise DomainError("temperature schedule needs tau0 >= tau_min > 0")
        if not 0.0 <= self.slack < 1.0:
            raise DomainError(f"slack must lie in [0, 1), got {self.slack}")
        if self.epochs < 0:
            raise DomainError("epochs must be nonnegative")
        if self.lam < 0 or self.eps0 < 0 or self.alpha <= 0:
            raise DomainError("need lam >= 0, eps0 >= 0 and alpha > 0")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def label(self):
        return "DF" if self.fair and self.lam > 0 else "vanilla"

    def to_dict(self):
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise DomainError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)


def anneal_temperature(step, tau0=1.0, tau_min=0.5, rate=3e-5):
    """``max(tau_min, tau0 * exp(-rate * step))``."""
    if step < 0:
        raise DomainError("step must be nonnegative")
    return max(tau_min, tau0 * math.exp(-rate * step))


@dataclass
class TrialResult:
    """Outcome of one training run, as used by grid search and selection."""

    config: TrainConfig
    dev_ll: float
    dev_epsilon: float
    dev_delta_dp: float
    trace: list
    init: dict = field(default_factory=dict)
    collapsed: bool = False
    checkpoint: str | None = None
    model: object = field(default=None, repr=False, compare=False)
    kind: str = ""

    def summary(self):
        return {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "kind": self.kind,
            "label": self.config.label,
            "dev_ll": self.dev_ll,
            "dev_epsilon": self.dev_epsilon,
            "dev_delta_dp": self.dev_delta_dp,
            "collapsed": self.collapsed,
            "checkpoint": self.checkpoint,
        }


def class_mean_probabilities(model, batch):
    return model.posterior(batch).mean(axis=0)


def is_collapsed(probs, threshold=COLLAPSE_THRESHOLD):
    """True when one class holds more than ``threshold`` of the mean mass."""
    return bool(np.asarray(probs).mean(axis=0).max() > threshold)


class GroupEncoder:
    """Intersection ids fitted on the training split, reused on dev/test."""

    def __init__(self, protected):
        if not protected:
            raise AuditError("training data has no protected attributes")
        self.ids, self.index = encode_intersections(protected)

    def encode(self, protected):
        return self.index.encode(protected)


def _dev_metrics(model, dev_batch, dev_protected, index, alpha):
    z = model.assignments(dev_batch)
    audit = audit_metrics(z, dev_protected, model.K, alpha=alpha, index=index)
    return heldout_ll(model, dev_batch), audit.epsilon_df, audit.delta_dp_overall


def _minibatches(n, size, rng):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def warm_start_sp(model, train_batch, config, rng, freeze=()):
    """Pre-train the prior network and regression head of an SP model.

    Maximizes ``log sum_z p(z | x^(z)) N(t; beta0 + beta_z[z], sigma_t)``
    over the prior network, ``beta0``, ``beta_z`` and ``sigma_t`` for
    ``config.warm_start_epochs`` epochs.  Parameters named in ``freeze``
    stay fixed.

    Returns
    -------
    list of float
        Mean negative warm-start objective per epoch.
    """
    if model.kind != "sp":
        raise DomainError("warm start applies to the criminal-justice model only")
    params = {k: v for k, v in model.warm_start_parameters().items() if k not in set(freeze)}
    state = AdamState(lr=config.warm_start_lr)
    n = len(train_batch)
    history = []
    for _ in range(config.warm_start_epochs):
        losses = []
        for idx in _minibatches(n, config.batch_size, rng):
            rows = sp_warm_start_rows(train_batch.take(idx), model.params, rng)
            loss = -rows.sum() * (1.0 / len(idx))
            if not np.isfinite(loss.item()):
                raise TrainingDivergence("warm_start", "warm-start objective is not finite")
            grads = ad.gradients(loss, params)
            adam_step(params, grads, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


def train(kind, splits, config, model=None, warm_start_freeze=()):
    """Run one SVI trial.

    Parameters
    ----------
    kind : {"nb", "gmm", "sp"}
    splits : DatasetSplits
    config : TrainConfig
    model : LatentModel, optional
        Pre-built model; by default one is built from ``config.seed``.

    Returns
    -------
    TrialResult
        ``trace`` holds one dict per epoch with the mean objective, the
        training-count epsilon, the dev epsilon-DF and the dev LL.

    Raises
    ------
    TrainingDivergence
        Names the term (ELBO part, objective or parameter) that went
        non-finite.
    """
    rng = RngStream(config.seed)
    if model is None:
        model = build_model(
            kind,
            splits.train,
            rng,
            K=config.K,
            rank=config.rank,
            widths=config.widths,
            activation=config.activation,
            dropout=config.dropout,
            batch_norm=config.batch_norm,
        )
    groups = GroupEncoder(splits.train.protected)
    train_batch = model.make_batch(splits.train)
    dev_batch = model.make_batch(splits.dev)
    dev_protected = splits.dev.protected
    n = len(train_batch)
    params = model.parameters()
    state = AdamState(lr=config.lr)

    if kind == "sp" and config.warm_start and config.warm_start_epochs > 0:
        warm_start_sp(model, train_batch, config, rng, freeze=warm_start_freeze)

    ll0, eps0_dev, dp0 = _dev_metrics(model, dev_batch, dev_protected, groups.index, config.alpha)
    init = {"dev_ll": ll0, "dev_epsilon": eps0_dev, "dev_delta_dp": dp0}
    counts = CountState.zeros(groups.index.n_groups, model.K, n)
    penalize = config.fair and config.lam > 0
    step = 0
    trace = []
    for epoch in range(config.epochs):
        objectives, train_eps = [], []
        for idx in _minibatches(n, config.batch_size, rng):
            m = len(idx)
            tau = anneal_temperature(step, config.tau0, config.tau_min, config.tau_rate)
            terms = model.elbo(train_batch.take(idx), tau, rng, prior_scale=m / n, training=True)
            counts = update_counts(counts, terms.z, groups.ids[idx], config.rho_t, n)
            try:
                eps = epsilon_df(counts.N_zs, counts.N_s, config.alpha)
            except AuditError:
                eps = None
            if penalize and eps is not None:
                objective = fair_objective(terms.total, fairness_penalty(eps, config.eps0), config.lam, m)
            else:
                objective = -terms.total * (1.0 / m)
            if config.l2 > 0:
                objective = objective + model.l2_penalty() * config.l2
            value = objective.item()
            if not np.isfinite(value):
                raise TrainingDivergence("objective", f"objective is {value} at epoch {epoch}")
            grads = ad.gradients(objective, params)
            adam_step(params, grads, state)
            counts = counts.detached()
            objectives.append(value)
            train_eps.append(float("nan") if eps is None else eps.item())
            step += 1
        dev_ll, dev_eps, dev_dp = _dev_metrics(model, dev_batch, dev_protected, groups.index, config.alpha)
        trace.append(
            {
                "epoch": epoch,
                "objective": float(np.mean(objectives)),
                "train_epsilon": train_eps[-1],
                "epsilon": dev_eps,
                "dev_ll": dev_ll,
            }
        )
    if trace:
        final = trace[-1]
        dev_ll, dev_eps = final["dev_ll"], final["epsilon"]
        dev_dp = _dev_metrics(model, dev_batch, dev_protected, groups.index, config.alpha)[2]
    else:
        dev_ll, dev_eps, dev_dp = ll0, eps0_dev, dp0
    collapsed = is_collapsed(model.posterior(dev_batch))
    return TrialResult(config, dev_ll, dev_eps, dev_dp, trace, init, collapsed, None, model, kind)


def random_restarts(kind, splits, config, seeds):
    """Train once per seed and keep the trial with the best dev LL.

    Diverged trials are skipped; if every trial diverges the error lists
    each seed's diagnostic.
    """
    seeds = list(seeds)
    if not seeds:
        raise DomainError("random restarts need at least one seed")
    best, failures = None, []
    for seed in seeds:
        try:
            result = train(kind, splits, replace(config, seed=int(seed)))
        except TrainingDivergence as exc:
            failures.append(f"seed {seed}: {exc}")
            continue
        if best is None or result.dev_ll > best.dev_ll:
            best = result
    if best is None:
        raise TrainingDivergence("restarts", "all restarts diverged; " + "; ".join(failures))
    return best


def expand_grid(base, **axes):
    """Cartesian product of option values over ``base``, in axis order."""
    names = list(axes)
    return [replace(base, **dict(zip(names, combo))) for combo in itertools.product(*(axes[k] for k in names))]


def vanilla_grid(base=None):
    """Architecture and optimizer grid with the fairness penalty off."""
    base = replace(base or TrainConfig(), fair=False, lam=0.0)
    return expand_grid(
        base,
        widths=TABLE5_WIDTHS,
        batch_size=TABLE5_BATCH_SIZES,
        lr=TABLE5_LEARNING_RATES,
        dropout=TABLE5_DROPOUT,
        activation=TABLE5_ACTIVATIONS,
        l2=TABLE5_L2,
    )


def df_grid(best_vanilla_config, lambdas=TABLE5_LAMBDAS):
    """The best vanilla configuration (seed included) with only ``lam`` varied."""
    return [replace(best_vanilla_config, fair=True, lam=float(lam)) for lam in lambdas]


def _run_trial(args):
    kind, splits, config, seeds = args
    try:
        if seeds:
            return random_restarts(kind, splits, config, seeds)
        return train(kind, splits, config)
    except TrainingDivergence as exc:
        return exc


def grid_search(kind, splits, configs, seeds=None, workers=1):
    """Evaluate every configuration; trials are independent.

    Parameters
    ----------
    seeds : sequence of int, optional
        Random restarts per configuration.
    workers : int
        Process count; results come back in grid order either way.

    Returns
    -------
    list of TrialResult
        Diverged configurations are dropped.
    """
    configs = list(configs)
    if not configs:
        raise DomainError("grid must contain at least one configuration")
    jobs = [(kind, splits, c, list(seeds) if seeds else None) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial, jobs))
    else:
        outcomes = [_run_trial(job) for job in jobs]
    return [r for r in outcomes if isinstance(r, TrialResult)]


def best_by_ll(trials):
    """Highest dev LL, preferring non-collapsed trials whenever any exist.

    A collapsed trial can reach a competitive likelihood while its latent
    classes carry no information, so it only wins when every trial collapsed.
    """
    healthy = [t for t in trials if not t.collapsed]
    return max(healthy or trials, key=lambda t: t.dev_ll)


@dataclass
class Selection:
    """Outcome of slack-tolerance selection."""

    winner: TrialResult
    best_vanilla: TrialResult
    threshold: float
    slack: float
    eligible: list
    fallback: bool

    def to_dict(self, trials=None):
        out = {
            "slack": self.slack,
            "best_vanilla_ll": self.best_vanilla.dev_ll,
            "threshold": self.threshold,
            "fallback": self.fallback,
            "n_eligible": len(self.eligible),
            "best_vanilla": self.best_vanilla.summary(),
            "winner": self.winner.summary(),
        }
        if trials is not None:
            out["n_trials"] = len(trials)
        return out


def slack_threshold(best_ll, slack):
    """``best_ll - slack * |best_ll|``."""
    return best_ll - slack * abs(best_ll)


def select_fair_model(best_vanilla, fair_trials, slack=0.02):
    """Fairest DF trial whose dev LL is within ``slack`` of the best vanilla.

    Eligible trials satisfy ``dev_ll >= best_ll - slack * |best_ll|``; among
    them the minimal dev epsilon-DF wins (first in input order on ties).  If
    none is eligible the DF trial with the highest dev LL is returned and
    ``fallback`` is set.
    """
    fair_trials = list(fair_trials)
    if not fair_trials:
        raise DomainError("no fair trials to select from")
    if not np.isfinite(best_vanilla.dev_ll):
        raise DomainError("best vanilla dev LL must be finite")
    threshold = slack_threshold(best_vanilla.dev_ll, slack)
    eligible = [t for t in fair_trials if t.dev_ll >= threshold]
    if eligible:
        winner = min(eligible, key=lambda t: t.dev_epsilon)
        return Selection(winner, best_vanilla, threshold, slack, eligible, False)
    return Selection(best_by_ll(fair_trials), best_vanilla, threshold, slack, [], True)


TRACE_COLUMNS = ("epoch", "objective", "train_epsilon", "epsilon", "dev_ll")


def write_trace(result, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in result.trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_scatter(trials, path):
    """One row per trial: label, lambda, dev LL and dev epsilon-DF."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial", "label", "lam", "seed", "dev_ll", "dev_epsilon", "dev_delta_dp"])
        for i, t in enumerate(trials):
            writer.writerow([i, t.config.label, t.config.lam, t.config.seed, repr(t.dev_ll), repr(t.dev_epsilon), repr(t.dev_delta_dp)])


def write_selection(selection, path, trials=None):
    with open(path, "w") as fh:
        json.dump(selection.to_dict(trials), fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = [
    "TABLE5_LAMBDAS",
    "COLLAPSE_THRESHOLD",
    "TrainConfig",
    "anneal_temperature",
    "TrialResult",
    "class_mean_probabilities",
    "is_collapsed",
    "GroupEncoder",
    "warm_start_sp",
    "train",
    "random_restarts",
    "expand_grid",
    "vanilla_grid",
    "df_grid",
    "grid_search",
    "best_by_ll",
    "Selection",
    "slack_threshold",
    "select_fair_model",
    "write_trace",
    "write_scatter",
    "write_selection",
]
