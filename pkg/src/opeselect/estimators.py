"""On-policy, Direct Method, IPW and Doubly Robust estimates of a policy value.

With ``pi(t|x)`` the target policy, ``p(t|x)`` the behavior propensity and
``mu(x, t)`` a fitted outcome model, over n logged rows ``(x_i, t_i, y_i)``:

.. math::

    V_{DM}  = n^{-1} \\sum_i \\sum_t \\pi(t|x_i) \\mu(x_i, t)

    V_{IPW} = n^{-1} \\sum_i \\frac{\\pi(t_i|x_i)}{p(t_i|x_i)} y_i

    V_{DR}  = V_{DM} + n^{-1} \\sum_i \\frac{\\pi(t_i|x_i)}{p(t_i|x_i)} (y_i - \\mu(x_i, t_i))
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from .data import LoggedDataset, OutcomeKind, Policy
from .exceptions import EstimatorError, ModelFitError
from .models import (
    DEFAULT_CLIP_FLOOR,
    DEFAULT_LAMBDA,
    OutcomeFamily,
    OutcomeModel,
    PropensityModel,
    cross_fit,
    fit_outcome_model,
    fit_propensity_model,
    resolve_propensities,
)

OutcomeSource = Union[OutcomeModel, np.ndarray]
PropensitySource = Union[str, PropensityModel, np.ndarray]


class EstimatorId(str, Enum):
    ON_POLICY = "OnPolicy"
    DM = "DM"
    IPW = "IPW"
    DR = "DR"


# fixed order, also the tie-break order for selection
OFF_POLICY_ESTIMATORS = (EstimatorId.DM, EstimatorId.IPW, EstimatorId.DR)


@dataclass(frozen=True)
class PolicyValueEstimate:
    value: float
    estimator_id: EstimatorId
    n: int
    target_policy_id: str
    data_policy_id: str

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("estimate needs n >= 1")
        if not np.isfinite(self.value):
            raise EstimatorError(f"{self.estimator_id.value} produced a non-finite value")

    def __float__(self) -> float:
        return float(self.value)


def _require_rows(dataset: LoggedDataset) -> None:
    if dataset.n == 0:
        raise EstimatorError("dataset is empty")


def _target_dist(dataset: LoggedDataset, policy: Policy) -> np.ndarray:
    if policy.m != dataset.m:
        raise EstimatorError(
            f"policy {policy.id!r} has m={policy.m} treatments, dataset has m={dataset.m}"
        )
    return policy.action_dist(dataset.X)


def _outcome_matrix(dataset: LoggedDataset, model: OutcomeSource) -> np.ndarray:
    if isinstance(model, OutcomeModel):
        if model.m != dataset.m:
            raise EstimatorError(f"outcome model covers {model.m} arms, dataset has m={dataset.m}")
        return model.predict(dataset.X)
    mu = np.asarray(model, dtype=float)
    if mu.shape != (dataset.n, dataset.m):
        raise EstimatorError(f"outcome predictions must have shape ({dataset.n}, {dataset.m}), got {mu.shape}")
    return mu


def _dm_terms(dist: np.ndarray, mu: np.ndarray) -> np.ndarray:
    needed = (dist > 0).any(axis=0)
    missing = needed & np.isnan(mu).any(axis=0)
    if missing.any():
        arm = int(np.flatnonzero(missing)[0])
        raise EstimatorError(f"outcome model has no fit for treatment arm {arm}, which the target policy uses")
    return (dist * np.where(needed, mu, 0.0)).sum(axis=1)


def _propensities(dataset: LoggedDataset, source: PropensitySource) -> np.ndarray:
    if isinstance(source, str):
        if source != "logged":
            raise ValueError(f"unknown propensity source {source!r}")
        p = dataset.propensities
        missing = np.isnan(p)
        if missing.any():
            raise EstimatorError(f"missing logged propensity in row {int(np.flatnonzero(missing)[0]) + 1}")
    elif isinstance(source, PropensityModel):
        try:
            p = resolve_propensities(dataset, source)
        except ModelFitError as e:
            raise EstimatorError(str(e)) from None
    else:
        p = np.asarray(source, dtype=float)
        if p.shape != (dataset.n,):
            raise EstimatorError(f"propensities must have shape ({dataset.n},), got {p.shape}")
        if np.isnan(p).any():
            raise EstimatorError(f"missing propensity in row {int(np.flatnonzero(np.isnan(p))[0]) + 1}")
    if (p <= 0).any():
        raise EstimatorError(f"propensity <= 0 in row {int(np.flatnonzero(p <= 0)[0]) + 1}")
    return p


def _importance_weights(dataset: LoggedDataset, dist: np.ndarray, source: PropensitySource) -> np.ndarray:
    p = _propensities(dataset, source)
    return dist[np.arange(dataset.n), dataset.treatments] / p


def on_policy_estimate(dataset: LoggedDataset) -> PolicyValueEstimate:
    """Sample mean of the logged outcomes: the value of the policy that logged them."""
    _require_rows(dataset)
    return PolicyValueEstimate(
        float(np.mean(dataset.outcomes)), EstimatorId.ON_POLICY, dataset.n, dataset.policy_id, dataset.policy_id
    )


def dm_estimate(dataset: LoggedDataset, policy: Policy, model: OutcomeSource) -> PolicyValueEstimate:
    """Direct Method: average model prediction under the target policy's treatment choices.

    ``model`` is a fitted :class:`OutcomeModel` or an (n, m) matrix of
    per-row predictions (e.g. from :func:`~opeselect.models.cross_fit`).
    """
    _require_rows(dataset)
    dist = _target_dist(dataset, policy)
    value = np.mean(_dm_terms(dist, _outcome_matrix(dataset, model)))
    return PolicyValueEstimate(float(value), EstimatorId.DM, dataset.n, policy.id, dataset.policy_id)


def ipw_estimate(
    dataset: LoggedDataset, policy: Policy, propensity_source: PropensitySource = "logged"
) -> PolicyValueEstimate:
    """Inverse Probability Weighting with raw (unnormalized) weights.

    ``propensity_source`` is ``"logged"``, a :class:`PropensityModel` (logged
    values still take precedence where present), or an explicit array of
    per-row propensities. The estimate may leave the outcome range.
    """
    _require_rows(dataset)
    dist = _target_dist(dataset, policy)
    w = _importance_weights(dataset, dist, propensity_source)
    value = np.mean(w * dataset.outcomes)
    return PolicyValueEstimate(float(value), EstimatorId.IPW, dataset.n, policy.id, dataset.policy_id)


def dr_estimate(
    dataset: LoggedDataset,
    policy: Policy,
    model: OutcomeSource,
    propensity_source: PropensitySource = "logged",
) -> PolicyValueEstimate:
    """Doubly Robust: DM plus an importance-weighted residual correction."""
    _require_rows(dataset)
    dist = _target_dist(dataset, policy)
    mu = _outcome_matrix(dataset, model)
    base = _dm_terms(dist, mu)
    w = _importance_weights(dataset, dist, propensity_source)
    rows = np.arange(dataset.n)
    mu_obs = mu[rows, dataset.treatments]
    # rows with zero weight contribute nothing, even where the logged arm is unfitted
    correction = np.where(w != 0, w * (dataset.outcomes - np.where(w != 0, mu_obs, 0.0)), 0.0)
    if np.isnan(correction).any():
        arm = int(dataset.treatments[np.flatnonzero(np.isnan(correction))[0]])
        raise EstimatorError(f"outcome model has no fit for logged treatment arm {arm}")
    value = np.mean(base + correction)
    return PolicyValueEstimate(float(value), EstimatorId.DR, dataset.n, policy.id, dataset.policy_id)


# --------------------------------------------------------------------------
# configured estimation (nuisance fitting + estimate), used by selection/oracles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSettings:
    """How nuisance models are obtained for DM/IPW/DR.

    ``family="auto"`` picks logistic for binary outcomes and ridge otherwise.
    ``propensity_source`` is ``"logged"`` or ``"estimated"``; the latter
    ignores logged values and fits a :class:`PropensityModel`.
    ``cross_fit_folds=0`` disables cross-fitting.
    """

    family: str = "auto"
    lam: float = DEFAULT_LAMBDA
    propensity_source: str = "logged"
    clip_floor: float = DEFAULT_CLIP_FLOOR
    cross_fit_folds: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.family != "auto":
            OutcomeFamily(self.family)
        if self.propensity_source not in ("logged", "estimated"):
            raise ValueError(f"propensity_source must be 'logged' or 'estimated', got {self.propensity_source!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 < self.clip_floor <= 0.5:
            raise ValueError("clip_floor must lie in (0, 0.5]")
        if self.cross_fit_folds < 0 or self.cross_fit_folds == 1:
            raise ValueError("cross_fit_folds must be 0 (off) or >= 2")

    def resolve_family(self, dataset: LoggedDataset) -> OutcomeFamily:
        if self.family != "auto":
            return OutcomeFamily(self.family)
        if dataset.outcome_kind is OutcomeKind.BINARY:
            return OutcomeFamily.LOGISTIC
        return OutcomeFamily.RIDGE_LINEAR


@dataclass
class Nuisance:
    """Per-row nuisance values for one dataset, or the error that prevented them."""

    outcome: Optional[np.ndarray] = None
    propensity: Optional[np.ndarray] = None
    outcome_error: Optional[Exception] = None
    propensity_error: Optional[Exception] = None

    def take(self, indices: np.ndarray) -> "Nuisance":
        return Nuisance(
            None if self.outcome is None else self.outcome[indices],
            None if self.propensity is None else self.propensity[indices],
            self.outcome_error,
            self.propensity_error,
        )


def needs(estimator: EstimatorId) -> tuple:
    estimator = EstimatorId(estimator)
    return (
        estimator in (EstimatorId.DM, EstimatorId.DR),
        estimator in (EstimatorId.IPW, EstimatorId.DR),
    )


def fit_nuisance(
    dataset: LoggedDataset,
    settings: EstimatorSettings,
    outcome: bool = True,
    propensity: bool = True,
) -> Nuisance:
    """Fit the outcome and/or propensity models on ``dataset`` and evaluate them on its rows."""
    nz = Nuisance()
    if outcome:
        try:
            family = settings.resolve_family(dataset)
            if settings.cross_fit_folds:
                nz.outcome = cross_fit(dataset, settings.cross_fit_folds, family, settings.lam, settings.seed)
            else:
                nz.outcome = fit_outcome_model(dataset, family, settings.lam).predict(dataset.X)
        except (ModelFitError, ValueError) as e:
            nz.outcome_error = e
    if propensity:
        try:
            if settings.propensity_source == "logged":
                nz.propensity = _propensities(dataset, "logged")
            else:
                model = fit_propensity_model(dataset, settings.clip_floor, settings.lam)
                nz.propensity = _propensities(dataset.without_propensities(), model)
        except (ModelFitError, EstimatorError) as e:
            nz.propensity_error = e
    return nz


def estimate(
    estimator: Union[EstimatorId, str],
    dataset: LoggedDataset,
    policy: Policy,
    settings: EstimatorSettings = EstimatorSettings(),
    nuisance: Optional[Nuisance] = None,
) -> PolicyValueEstimate:
    """Run one named estimator, fitting nuisance models when none are supplied."""
    estimator = EstimatorId(estimator)
    if estimator is EstimatorId.ON_POLICY:
        return on_policy_estimate(dataset)
    need_mu, need_p = needs(estimator)
    if nuisance is None:
        nuisance = fit_nuisance(dataset, settings, need_mu, need_p)
    if need_mu and nuisance.outcome is None:
        raise EstimatorError(f"outcome model unavailable: {nuisance.outcome_error}")
    if need_p and nuisance.propensity is None:
        raise EstimatorError(f"propensities unavailable: {nuisance.propensity_error}")
    if estimator is EstimatorId.DM:
        return dm_estimate(dataset, policy, nuisance.outcome)
    if estimator is EstimatorId.IPW:
        return ipw_estimate(dataset, policy, nuisance.propensity)
    return dr_estimate(dataset, policy, nuisance.outcome, nuisance.propensity)


def make_estimator(
    estimator: Union[EstimatorId, str], settings: EstimatorSettings = EstimatorSettings()
) -> Callable[[LoggedDataset, Policy], float]:
    """Bind an estimator name and settings into ``f(dataset, policy) -> value``."""
    estimator = EstimatorId(estimator)

    def run(dataset: LoggedDataset, policy: Policy) -> float:
        return estimate(estimator, dataset, policy, settings).value

    run.__name__ = f"{estimator.value}_estimator"
    return run
