"""Data-driven selection among DM, IPW and DR off-policy estimators."""

__version__ = "0.1.0"

from .data import (
    LoggedDataset,
    OutcomeKind,
    Policy,
    PolicyKind,
    Row,
    Schema,
    Violation,
    load_dataset,
    policy_from_spec,
    policy_prob,
    save_dataset,
    validate,
)
from .estimators import (
    EstimatorId,
    EstimatorSettings,
    PolicyValueEstimate,
    dm_estimate,
    dr_estimate,
    ipw_estimate,
    on_policy_estimate,
)
from .models import (
    OutcomeModel,
    PropensityModel,
    cross_fit,
    fit_outcome_model,
    fit_propensity_model,
    predict_outcome,
    propensity,
)
from .selection import SelectionReport, SubsampleSpec, make_subsamples, relative_rmse, run_selection
from .synthetic import SyntheticEnv, generate, oracle_rmse, scenario, true_policy_value

__all__ = [
    "EstimatorId", "EstimatorSettings", "LoggedDataset", "OutcomeKind", "OutcomeModel", "Policy",
    "PolicyKind", "PolicyValueEstimate", "PropensityModel", "Row", "Schema", "SelectionReport",
    "SubsampleSpec", "SyntheticEnv", "Violation", "cross_fit", "dm_estimate", "dr_estimate",
    "fit_outcome_model", "fit_propensity_model", "generate", "ipw_estimate", "load_dataset",
    "make_subsamples", "on_policy_estimate", "oracle_rmse", "policy_from_spec", "policy_prob",
    "predict_outcome", "propensity", "relative_rmse", "run_selection", "save_dataset", "scenario",
    "true_policy_value", "validate",
]
