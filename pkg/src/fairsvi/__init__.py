"""Intersectional differentially fair stochastic variational inference.

Discrete latent variable models (naive Bayes, Gaussian mixture and a
criminal-justice model) trained by SVI with Gumbel-Softmax relaxations,
optionally penalized toward epsilon-differential fairness across
intersections of protected attributes.
"""

from .autodiff import AdamState, Tensor, adam_step, gradients
from .data import DatasetSchema, SplitSpec, load_dataset, synth_gmm, synth_nb, synth_sp
from .distributions import RngStream
from .evaluation import EvalReport, assemble_report, heldout_ll
from .fairness import FairnessConfig, GroupIndex, audit_metrics, epsilon_df
from .models import build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrialResult, grid_search, random_restarts, select_fair_model, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Tensor",
    "adam_step",
    "gradients",
    "DatasetSchema",
    "SplitSpec",
    "load_dataset",
    "synth_gmm",
    "synth_nb",
    "synth_sp",
    "RngStream",
    "EvalReport",
    "assemble_report",
    "heldout_ll",
    "FairnessConfig",
    "GroupIndex",
    "audit_metrics",
    "epsilon_df",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "TrialResult",
    "grid_search",
    "random_restarts",
    "select_fair_model",
    "train",
]
