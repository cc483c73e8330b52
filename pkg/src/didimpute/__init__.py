"""Imputation estimator for staggered difference-in-differences designs."""

__version__ = "0.1.0"

from .benchmark import DgpSpec, NoiseSpec, exact_moments, reference_estimator, run_table1
from .design import (
    EstimandWeights,
    OutcomeModelSpec,
    TreatmentEffectModel,
    build_estimand,
    check_estimability,
    materialize_design,
)
from .estimator import FitResult, ImputationDiD, adjusted_weights, fit_imputation, fit_joint
from .inference import VarianceSpec, conservative_se, covariance_matrix, pretest
from .panel import NEVER_TREATED, Panel, PanelSchema, horizon, load_panel, partition
from .weights import (
    ImpliedWeights,
    detect_underidentification,
    implied_weights,
    implied_weights_closed,
    implied_weights_iterative,
    static_ols_weights,
)

__all__ = [
    "DgpSpec",
    "EstimandWeights",
    "FitResult",
    "ImpliedWeights",
    "ImputationDiD",
    "NEVER_TREATED",
    "NoiseSpec",
    "OutcomeModelSpec",
    "Panel",
    "PanelSchema",
    "TreatmentEffectModel",
    "VarianceSpec",
    "adjusted_weights",
    "build_estimand",
    "check_estimability",
    "conservative_se",
    "covariance_matrix",
    "detect_underidentification",
    "exact_moments",
    "fit_imputation",
    "fit_joint",
    "horizon",
    "implied_weights",
    "implied_weights_closed",
    "implied_weights_iterative",
    "load_panel",
    "materialize_design",
    "partition",
    "pretest",
    "reference_estimator",
    "run_table1",
    "static_ols_weights",
]
