"""Command-line entry point: ``fairsvi {train,audit,grid,synth}``.

Run configurations are INI files with ``[run]``, ``[split]``, ``[train]``
and ``[fairness]`` sections; every option has a default except the data
path.  Command-line flags override file values.  Relative paths inside a
configuration file resolve against the file's directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
The environment variable ``FAIRSVI_OUTPUT_DIR`` sets the default output
directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetSchema, SplitSpec, load_dataset, synth_gmm, synth_nb, synth_sp
from .distributions import RngStream
from .errors import (
    AuditError,
    ConfigError,
    DataError,
    DomainError,
    SchemaError,
    TrainingDivergence,
)
from .evaluation import assemble_report, config_hash
from .fairness import FairnessConfig, audit_metrics
from .models import load_checkpoint, save_checkpoint
from .training import (
    TABLE5_LAMBDAS,
    GroupEncoder,
    TrainConfig,
    best_by_ll,
    df_grid,
    expand_grid,
    grid_search,
    select_fair_model,
    train,
    write_scatter,
    write_selection,
    write_trace,
)

ENV_OUTPUT_DIR = "FAIRSVI_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "fairsvi-output"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
MODEL_NAMES = {"nb": "NB", "gmm": "GMM", "sp": "SP"}
SPLITS = ("train", "dev", "test")


def default_output_dir():
    return os.environ.get(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)


# -- run configuration -------------------------------------------------------
@dataclass
class RunConfig:
    """Everything one ``train`` or ``grid`` invocation needs."""

    data: str | None = None
    schema: str | None = None
    model: str = "nb"
    output_dir: str = field(default_factory=default_output_dir)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)

    def training_config(self):
        """``TrainConfig`` with the fairness section folded in."""
        return replace(
            self.train,
            fair=self.train.fair or self.fairness.lam > 0,
            lam=self.fairness.lam,
            eps0=self.fairness.eps0,
            alpha=self.fairness.alpha,
        )

    def to_dict(self):
        return {
            "data": self.data,
            "schema": self.schema,
            "model": self.model,
            "output_dir": self.output_dir,
            "split": asdict(self.split),
            "train": self.training_config().to_dict(),
        }


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TRAIN_DEFAULTS = TrainConfig()


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_widths(text):
    parts = [p for p in str(text).replace("x", ",").split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"layer widths must be integers, got {text!r}") from None


def _coerce_train(name, text):
    if name not in _TRAIN_FIELDS:
        raise ConfigError(f"unknown training option {name!r}")
    default = getattr(_TRAIN_DEFAULTS, name)
    if isinstance(text, str) and text.strip().lower() in ("none", "") and default is None:
        return None
    try:
        if name == "widths":
            return _parse_widths(text)
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int) or name in ("K", "rank"):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return str(text).strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def _resolve(path, base):
    if path is None:
        return None
    p = Path(path).expanduser()
    return str(p if p.is_absolute() or base is None else (base / p))


def read_run_config(path=None):
    """Parse an INI run configuration into a :class:`RunConfig`."""
    cfg = RunConfig()
    if path is None:
        return cfg
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    base = Path(path).resolve().parent
    known = {"run", "split", "train", "fairness"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    if parser.has_section("run"):
        run = parser["run"]
        for key in run:
            if key not in ("model", "data", "schema", "output_dir"):
                raise ConfigError(f"unknown [run] option {key!r}")
        cfg.model = run.get("model", cfg.model).strip()
        cfg.data = _resolve(run.get("data"), base)
        cfg.schema = _resolve(run.get("schema"), base)
        if "output_dir" in run:
            cfg.output_dir = _resolve(run["output_dir"], base)
    try:
        if parser.has_section("split"):
            sec = parser["split"]
            cfg.split = SplitSpec(
                train=float(sec.get("train", cfg.split.train)),
                dev=float(sec.get("dev", cfg.split.dev)),
                test=float(sec.get("test", cfg.split.test)),
                seed=int(sec.get("seed", cfg.split.seed)),
            )
        if parser.has_section("train"):
            values = {k: _coerce_train(k, v) for k, v in parser["train"].items()}
            cfg.train = replace(cfg.train, **values)
        if parser.has_section("fairness"):
            sec = parser["fairness"]
            for key in sec:
                if key not in ("lambda", "eps0", "alpha"):
                    raise ConfigError(f"unknown [fairness] option {key!r}")
            cfg.fairness = FairnessConfig(
                alpha=float(sec.get("alpha", cfg.fairness.alpha)),
                eps0=float(sec.get("eps0", cfg.fairness.eps0)),
                lam=float(sec.get("lambda", cfg.fairness.lam)),
            )
    except (ValueError, SchemaError, DomainError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    return cfg


# Flags shared by ``train`` and ``grid``: (flag, dest, type, help).
TRAIN_FLAGS = [
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "minibatch size m"),
    ("--lr", "lr", float, "Adam step size"),
    ("--rho-t", "rho_t", float, "count step size"),
    ("--tau0", "tau0", float, "initial Gumbel-Softmax temperature"),
    ("--tau-min", "tau_min", float, "temperature floor"),
    ("--tau-rate", "tau_rate", float, "temperature decay rate per step"),
    ("--dropout", "dropout", float, "dropout probability"),
    ("--activation", "activation", str, "hidden activation (relu or softplus)"),
    ("--widths", "widths", _parse_widths, "hidden layer widths, e.g. 64,32"),
    ("--l2", "l2", float, "l2 weight on inference-network weights"),
    ("--seed", "seed", int, "training seed"),
    ("--slack", "slack", float, "LL slack tolerance for fair selection"),
    ("--K", "K", int, "number of latent classes"),
    ("--rank", "rank", int, "covariance factor rank (gmm)"),
    ("--warm-start-epochs", "warm_start_epochs", int, "warm-start epochs (sp)"),
]


def add_run_flags(p):
    p.add_argument("--config", help="INI run configuration file")
    p.add_argument("--model", choices=sorted(MODEL_NAMES), help="model kind (default: nb)")
    p.add_argument("--data", help="dataset CSV (required, here or in the config)")
    p.add_argument("--schema", help="schema INI file (default: <data stem>.schema.cfg)")
    p.add_argument(
        "--output-dir",
        help=f"output directory (default: ${ENV_OUTPUT_DIR} or {DEFAULT_OUTPUT_DIR!r})",
    )
    p.add_argument("--split-seed", type=int, help=f"split shuffle seed (default: {SplitSpec().seed})")
    for flag, dest, typ, text in TRAIN_FLAGS:
        default = getattr(_TRAIN_DEFAULTS, dest)
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        p.add_argument(flag, dest=dest, type=typ, help=f"{text} (default: {shown})")
    p.add_argument("--no-warm-start", action="store_true", help="skip the SP warm start (default: off)")
    p.add_argument("--no-batch-norm", action="store_true", help="disable output batch norm (default: off)")
    p.add_argument("--lambda", dest="lam", type=float, help="fairness trade-off weight (default: 0.0)")
    p.add_argument("--eps0", type=float, help="target epsilon (default: 0.0)")
    p.add_argument("--alpha", type=float, help="Dirichlet smoothing (default: 1.0)")


def run_config_from_args(args):
    """Config file values, then flags on top (flags win)."""
    cfg = read_run_config(args.config)
    if args.model:
        cfg.model = args.model
    if args.data:
        cfg.data = args.data
    if args.schema:
        cfg.schema = args.schema
    if args.output_dir:
        cfg.output_dir = args.output_dir
    try:
        if args.split_seed is not None:
            cfg.split = replace(cfg.split, seed=args.split_seed)
        updates = {dest: getattr(args, dest) for _, dest, _, _ in TRAIN_FLAGS if getattr(args, dest) is not None}
        if args.no_warm_start:
            updates["warm_start"] = False
        if args.no_batch_norm:
            updates["batch_norm"] = False
        cfg.train = replace(cfg.train, **updates)
        fair = {}
        if args.lam is not None:
            fair["lam"] = args.lam
        if args.eps0 is not None:
            fair["eps0"] = args.eps0
        if args.alpha is not None:
            fair["alpha"] = args.alpha
        cfg.fairness = replace(cfg.fairness, **fair)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    return validate_run_config(cfg)


def validate_run_config(cfg):
    if cfg.model not in MODEL_NAMES:
        raise ConfigError(f"unknown model kind {cfg.model!r}; choose from {sorted(MODEL_NAMES)}")
    if not cfg.data:
        raise ConfigError("no dataset path given (use --data or [run] data)")
    if not Path(cfg.data).is_file():
        raise ConfigError(f"dataset file not found: {cfg.data}")
    if cfg.schema is None:
        cfg.schema = str(Path(cfg.data).with_suffix(".schema.cfg"))
    if not Path(cfg.schema).is_file():
        raise ConfigError(f"schema file not found: {cfg.schema}")
    return cfg


def load_splits(cfg):
    schema = DatasetSchema.from_file(cfg.schema)
    return load_dataset(cfg.data, schema, cfg.split)


def model_id(kind, config):
    prefix = "DF" if config.label == "DF" else "Vanilla"
    return f"{prefix}-{MODEL_NAMES[kind]}"


# -- commands ----------------------------------------------------------------
def cmd_train(args):
    cfg = run_config_from_args(args)
    splits = load_splits(cfg)
    config = cfg.training_config()
    result = train(cfg.model, splits, config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(result.model, ckpt, metadata={"run": cfg.to_dict()})
    write_trace(result, out / "trace.csv")
    index = GroupEncoder(splits.train.protected).index
    report = assemble_report(
        result.model,
        splits.dev,
        model_id=model_id(cfg.model, config),
        index=index,
        alpha=config.alpha,
        metadata={
            "split": "dev",
            "seed": config.seed,
            "config_hash": config_hash(config),
            "label": config.label,
            "collapsed": result.collapsed,
        },
    )
    report.write(out / "report_dev.json", out / "report_dev.csv")
    summary = {
        "model": report.model,
        "label": config.label,
        "dev_ll": result.dev_ll,
        "dev_epsilon": result.dev_epsilon,
        "epochs": len(result.trace),
        "checkpoint": str(ckpt),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_assignments(path, column, protected_cols):
    import pandas as pd

    if not Path(path).is_file():
        raise ConfigError(f"assignments file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if column not in frame.columns:
        raise DataError(f"assignments file lacks a {column!r} column")
    try:
        z = frame[column].astype(int).to_numpy()
    except ValueError:
        raise DataError(f"column {column!r} must hold integer class ids") from None
    names = protected_cols or [c for c in frame.columns if c != column]
    missing = [c for c in names if c not in frame.columns]
    if missing:
        raise DataError(f"assignments file lacks protected columns {missing}")
    return z, {c: frame[c].to_numpy(dtype=object) for c in names}


def write_assignments(path, z, protected, column="z"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        names = list(protected)
        writer.writerow(names + [column])
        for i in range(len(z)):
            writer.writerow([protected[a][i] for a in names] + [int(z[i])])


def cmd_audit(args):
    if bool(args.assignments) == bool(args.checkpoint):
        raise ConfigError("give exactly one of --assignments or --checkpoint")
    if args.assignments:
        protected_cols = [c.strip() for c in args.protected.split(",")] if args.protected else None
        z, protected = _read_assignments(args.assignments, args.column, protected_cols)
        K = args.K if args.K is not None else int(z.max()) + 1
        source = {"assignments": args.assignments}
    else:
        if not Path(args.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        model, meta = load_checkpoint(args.checkpoint)
        run = meta.get("metadata", {}).get("run", {})
        data = args.data or run.get("data")
        schema = args.schema or run.get("schema")
        for label, p in (("dataset", data), ("schema", schema)):
            if not p or not Path(p).is_file():
                raise ConfigError(f"{label} file not found: {p}")
        spec = SplitSpec(**run["split"]) if "split" in run else SplitSpec()
        splits = load_dataset(data, DatasetSchema.from_file(schema), spec)
        part = getattr(splits, args.split)
        z = model.assignments(model.make_batch(part))
        protected = part.protected
        K = model.K
        source = {"checkpoint": args.checkpoint, "split": args.split}
        if args.export:
            write_assignments(args.export, z, protected)
    report = audit_metrics(z, protected, K, alpha=args.alpha)
    payload = report.to_dict()
    payload["source"] = source
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else Path(args.output_dir or default_output_dir()) / "audit.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    return EXIT_OK


def read_grid_file(path, base):
    """Parse a grid INI: ``[vanilla]`` option lists, ``[df] lambda``, ``[restarts] seeds``."""
    if not Path(path).is_file():
        raise ConfigError(f"grid file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    axes = {}
    if parser.has_section("vanilla"):
        for key, text in parser["vanilla"].items():
            items = [t.strip() for t in (text.split(";") if key == "widths" else text.split(",")) if t.strip()]
            axes[key] = [_coerce_train(key, t) for t in items]
    lambdas = TABLE5_LAMBDAS
    if parser.has_section("df") and "lambda" in parser["df"]:
        lambdas = tuple(float(t) for t in parser["df"]["lambda"].split(",") if t.strip())
    seeds = None
    if parser.has_section("restarts") and "seeds" in parser["restarts"]:
        seeds = [int(t) for t in parser["restarts"]["seeds"].split(",") if t.strip()]
    try:
        configs = expand_grid(replace(base, fair=False, lam=0.0), **axes)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    return configs, lambdas, seeds


def cmd_grid(args):
    cfg = run_config_from_args(args)
    base = cfg.training_config()
    configs, lambdas, seeds = read_grid_file(args.grid, base)
    splits = load_splits(cfg)
    vanilla = grid_search(cfg.model, splits, configs, seeds=seeds, workers=args.workers)
    if not vanilla:
        raise TrainingDivergence("grid", "every vanilla trial diverged")
    best = best_by_ll(vanilla)
    fair = grid_search(cfg.model, splits, df_grid(best.config, lambdas), workers=args.workers)
    if not fair:
        raise TrainingDivergence("grid", "every DF trial diverged")
    selection = select_fair_model(best, fair, slack=base.slack)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = vanilla + fair
    for name, trial in (("best_vanilla", best), ("selected_df", selection.winner)):
        path = out / f"{name}.npz"
        save_checkpoint(trial.model, path, metadata={"run": cfg.to_dict(), "trial": trial.config.to_dict()})
        trial.checkpoint = str(path)
    write_scatter(trials, out / "trials.csv")
    write_selection(selection, out / "selection.json", trials)
    print(json.dumps(selection.to_dict(trials), sort_keys=True))
    return EXIT_OK


def cmd_synth(args):
    out = Path(args.out_dir or default_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(args.seed)
    params = {"kind": args.kind, "n": args.n, "seed": args.seed}
    if args.kind == "nb":
        frame, schema, truth = synth_nb(args.n, K=args.K or 2, skew=args.skew, rng=rng)
        params.update(K=args.K or 2, skew=args.skew)
    elif args.kind == "gmm":
        frame, schema, truth = synth_gmm(args.n, K=args.K or 3, separation=args.separation, skew=args.skew, rng=rng)
        params.update(K=args.K or 3, skew=args.skew, separation=args.separation)
    else:
        frame, schema, truth = synth_sp(args.n, rng=rng)
    frame.to_csv(out / "data.csv", index=False, lineterminator="\n")
    schema.to_file(out / "data.schema.cfg")
    columns = {"z": truth.z}
    if truth.u is not None:
        columns["u"] = truth.u
    with open(out / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", *columns])
        for i in range(len(truth.z)):
            writer.writerow([i, *(int(v[i]) for v in columns.values())])
    sidecar = {"parameters": params, "generating_epsilon_df": truth.epsilon_df}
    if "priors" in truth.params:
        sidecar["group_priors"] = np.asarray(truth.params["priors"]).tolist()
    (out / "truth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out_dir": str(out), "rows": len(frame)}, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fairsvi", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write checkpoint, trace and dev report")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="fairness audit of hard assignments or a checkpoint")
    p.add_argument("--assignments", help="CSV of class ids plus protected columns")
    p.add_argument("--column", default="z", help="class id column in --assignments (default: z)")
    p.add_argument("--protected", help="comma-separated protected columns (default: all but --column)")
    p.add_argument("--K", type=int, help="number of classes (default: max id + 1)")
    p.add_argument("--checkpoint", help="checkpoint written by train or grid")
    p.add_argument("--data", help="dataset CSV (default: path stored in the checkpoint)")
    p.add_argument("--schema", help="schema file (default: path stored in the checkpoint)")
    p.add_argument("--split", choices=SPLITS, default="dev", help="split to audit (default: dev)")
    p.add_argument("--export", help="also write the checkpoint's hard assignments to this CSV")
    p.add_argument("--alpha", type=float, default=1.0, help="Dirichlet smoothing (default: 1.0)")
    p.add_argument("--out", help="report path (default: <output dir>/audit.json)")
    p.add_argument("--output-dir", help=f"output directory (default: ${ENV_OUTPUT_DIR} or {DEFAULT_OUTPUT_DIR!r})")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("grid", help="vanilla grid, lambda-only DF grid and slack selection")
    add_run_flags(p)
    p.add_argument("--grid", required=True, help="grid INI file")
    p.add_argument("--workers", type=int, default=1, help="concurrent trials (default: 1)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("kind", choices=sorted(MODEL_NAMES), help="generator")
    p.add_argument("--n", type=int, default=1000, help="rows (default: 1000)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--K", type=int, help="classes (default: 2 for nb, 3 for gmm)")
    p.add_argument("--skew", type=float, default=0.0, help="group prior skew in [0, 1) (default: 0.0)")
    p.add_argument("--separation", type=float, default=4.0, help="gmm mean spacing (default: 4.0)")
    p.add_argument("--out-dir", help=f"output directory (default: ${ENV_OUTPUT_DIR} or {DEFAULT_OUTPUT_DIR!r})")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged in {exc.term}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, AuditError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
