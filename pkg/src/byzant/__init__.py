"""Byzantine-robust distributed optimization simulator.

Trust-score gradient aggregation with a server-held trial function, the
standard gradient attacks, robust baselines, and a deterministic experiment
harness.
"""

__version__ = "0.1.0"

from .aggregation import (
    ContributionCoeffs,
    TrustWeights,
    autobant_solve,
    autobant_step,
    bant_step,
    bant_weights,
    baseline_coordinate_median,
    baseline_mean,
    centered_clip,
    contribution_coeffs,
    simbant_weights,
    zeno_aggregate,
)
from .attacks import AttackSpec, apply_attack, byzantine_schedule
from .engine import ExperimentConfig, run_experiment
from .problems import ProblemFamily, WorkerShard, audit_heterogeneity, build_problem, honest_gradient
from .trial import TrialSet, build_trial_set, trial_grad, trial_loss, zeta_curve

__all__ = [
    "__version__",
    "AttackSpec",
    "ContributionCoeffs",
    "ExperimentConfig",
    "ProblemFamily",
    "TrialSet",
    "TrustWeights",
    "WorkerShard",
    "apply_attack",
    "audit_heterogeneity",
    "autobant_solve",
    "autobant_step",
    "bant_step",
    "bant_weights",
    "baseline_coordinate_median",
    "baseline_mean",
    "build_problem",
    "build_trial_set",
    "byzantine_schedule",
    "centered_clip",
    "contribution_coeffs",
    "honest_gradient",
    "run_experiment",
    "simbant_weights",
    "trial_grad",
    "trial_loss",
    "zeno_aggregate",
    "zeta_curve",
]
