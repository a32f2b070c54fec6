"""Bellman-calibrated and debiased estimation of linear functionals of the Q-function."""

__version__ = "0.1.0"

from .calibration import (
    CalibratedQ,
    CalibrationReport,
    check_bellman_orthogonality,
    cross_fitted_calibration,
    fitted_q_calibration,
)
from .estimators import (
    EstimateReport,
    InfluenceValues,
    PreconditionError,
    bootstrap_calibration_ci,
    drl_model_robust,
    drl_nonparametric,
    drl_semiparametric,
    eif_variance,
    plugin_calibrated,
)
from .fqi import FQIConfig, cross_fit_fqi, fitted_q_iteration
from .functionals import FunctionalSpec, ab_test_ate, ate_contrast, custom_linear, policy_value
from .mdp import (
    CrossFittedQ,
    DomainError,
    OverlapError,
    Policy,
    StateSpace,
    TabularMDP,
    TabularQ,
    Transition,
    TransitionDataset,
    bellman_target,
    tabular_occupancy_ratio,
    tabular_q_solve,
    value_under_policy,
)
from .regression import RegressorSpec, StepFunction, fit_least_squares, pava_isotonic
from .riesz import (
    RepresenterError,
    RieszWeights,
    estimate_representer_dimreduced,
    estimate_representer_linear,
    tree_leaf_features,
)
from .simulation import SimConfig, SimTruth, analytic_mdp, generate_dataset, oracle_truth

__all__ = [
    "CalibratedQ",
    "CalibrationReport",
    "CrossFittedQ",
    "DomainError",
    "EstimateReport",
    "FQIConfig",
    "FunctionalSpec",
    "InfluenceValues",
    "OverlapError",
    "Policy",
    "PreconditionError",
    "RegressorSpec",
    "RepresenterError",
    "RieszWeights",
    "SimConfig",
    "SimTruth",
    "StateSpace",
    "StepFunction",
    "TabularMDP",
    "TabularQ",
    "Transition",
    "TransitionDataset",
    "ab_test_ate",
    "analytic_mdp",
    "ate_contrast",
    "bellman_target",
    "bootstrap_calibration_ci",
    "check_bellman_orthogonality",
    "cross_fit_fqi",
    "cross_fitted_calibration",
    "custom_linear",
    "drl_model_robust",
    "drl_nonparametric",
    "drl_semiparametric",
    "eif_variance",
    "estimate_representer_dimreduced",
    "estimate_representer_linear",
    "fit_least_squares",
    "fitted_q_calibration",
    "fitted_q_iteration",
    "generate_dataset",
    "oracle_truth",
    "pava_isotonic",
    "plugin_calibrated",
    "policy_value",
    "tabular_occupancy_ratio",
    "tabular_q_solve",
    "tree_leaf_features",
    "value_under_policy",
]
