"""Data-driven estimator selection from two logs collected by two policies.

Each candidate estimator estimates the value of policy B from resamples of
log A (and of policy A from log B). The on-policy mean of the full log of the
target policy is taken as ground truth, and estimators are ranked by the
relative RMSE of their resampled estimates against it.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import LoggedDataset, Policy
from .estimators import (
    OFF_POLICY_ESTIMATORS,
    EstimatorId,
    EstimatorSettings,
    Nuisance,
    estimate,
    fit_nuisance,
    needs,
    on_policy_estimate,
)
from .exceptions import OPEError, ZeroGroundTruthError

DEFAULT_K = 100
SITUATION_A_TO_B = "D_A -> pi_B"
SITUATION_B_TO_A = "D_B -> pi_A"


class SubsampleMethod(str, Enum):
    BOOTSTRAP = "bootstrap"
    SPLIT = "split"


@dataclass(frozen=True)
class SubsampleSpec:
    """Resampling plan producing K subsamples of a log.

    ``bootstrap`` draws K with-replacement resamples of size n; subsample k
    uses the generator seeded by ``(seed, k)``. ``split`` permutes the rows
    once with ``seed`` and cuts the permutation into K disjoint blocks, or,
    when ``split_fraction`` is given, draws K independent without-replacement
    subsets of ``round(split_fraction * n)`` rows.
    """

    method: SubsampleMethod = SubsampleMethod.BOOTSTRAP
    k: int = DEFAULT_K
    seed: int = 0
    split_fraction: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "method", SubsampleMethod(self.method))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.split_fraction is not None:
            if self.method is not SubsampleMethod.SPLIT:
                raise ValueError("split_fraction applies only to the split method")
            if not 0.0 < self.split_fraction <= 1.0:
                raise ValueError("split_fraction must lie in (0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method.value,
            "k": self.k,
            "seed": self.seed,
            "split_fraction": self.split_fraction,
        }


def subsample_indices(n: int, spec: SubsampleSpec) -> List[np.ndarray]:
    if spec.method is SubsampleMethod.BOOTSTRAP:
        return [np.random.default_rng([spec.seed, k]).integers(0, n, size=n) for k in range(spec.k)]
    if spec.split_fraction is not None:
        size = max(1, int(round(spec.split_fraction * n)))
        return [
            np.random.default_rng([spec.seed, k]).choice(n, size=size, replace=False)
            for k in range(spec.k)
        ]
    if spec.k > n:
        raise ValueError(f"split into k={spec.k} blocks needs at least k rows, have n={n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return list(np.array_split(perm, spec.k))


def make_subsamples(dataset: LoggedDataset, spec: SubsampleSpec) -> List[LoggedDataset]:
    """The K resampled logs described by ``spec``."""
    return [dataset.take(idx) for idx in subsample_indices(dataset.n, spec)]


def relative_rmse(estimates: Sequence[float], ground_truth: float) -> float:
    """Root mean squared error of ``estimates`` relative to ``ground_truth``."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 1:
        raise ValueError("relative RMSE needs at least one estimate")
    if ground_truth == 0:
        raise ZeroGroundTruthError("ground truth is 0; relative error is undefined")
    return float(np.sqrt(np.mean(((est - ground_truth) / ground_truth) ** 2)))


def select_best(rrmse: Mapping[str, float]) -> Optional[str]:
    """Estimator with the smallest relative RMSE; ties go to the earlier of DM, IPW, DR."""
    order = [e.value for e in OFF_POLICY_ESTIMATORS]
    names = sorted(rrmse, key=lambda e: order.index(e) if e in order else len(order))
    best = None
    for name in names:
        if best is None or rrmse[name] < rrmse[best]:
            best = name
    return best


@dataclass
class DirectionResult:
    """Scores for one cross-evaluation direction, e.g. log A used to value policy B."""

    situation: str
    data_policy_id: str
    target_policy_id: str
    ground_truth: float
    rrmse: Dict[str, float] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)
    estimates: Dict[str, List[float]] = field(default_factory=dict)
    best: Optional[str] = None
    undefined_reason: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.undefined_reason is None

    def to_dict(self, estimators: Sequence[str]) -> Dict[str, Any]:
        cells: Dict[str, Any] = {}
        for name in estimators:
            if name in self.rrmse:
                cells[name] = self.rrmse[name]
            elif name in self.failures:
                cells[name] = "failed"
            else:
                cells[name] = "undefined"
        return {
            "situation": self.situation,
            "data_policy_id": self.data_policy_id,
            "target_policy_id": self.target_policy_id,
            "ground_truth": self.ground_truth,
            "status": "ok" if self.defined else "undefined",
            "undefined_reason": self.undefined_reason,
            "rrmse": cells,
            "best": self.best,
            "failures": dict(self.failures),
            "estimates": {k: list(v) for k, v in self.estimates.items()},
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "DirectionResult":
        rrmse = {k: float(v) for k, v in raw["rrmse"].items() if not isinstance(v, str)}
        return cls(
            situation=raw["situation"],
            data_policy_id=raw["data_policy_id"],
            target_policy_id=raw["target_policy_id"],
            ground_truth=float(raw["ground_truth"]),
            rrmse=rrmse,
            failures=dict(raw.get("failures", {})),
            estimates={k: [float(x) for x in v] for k, v in raw.get("estimates", {}).items()},
            best=raw.get("best"),
            undefined_reason=raw.get("undefined_reason"),
        )


@dataclass
class SelectionReport:
    """Relative RMSE of every estimator in both directions, plus the winners."""

    directions: Tuple[DirectionResult, DirectionResult]
    ground_truths: Dict[str, float]
    estimators: Tuple[str, ...]
    k: int
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def best_per_direction(self) -> Dict[str, Optional[str]]:
        return {d.situation: d.best for d in self.directions}

    def direction(self, situation: str) -> DirectionResult:
        for d in self.directions:
            if d.situation == situation:
                return d
        raise KeyError(situation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimators": list(self.estimators),
            "directions": [d.to_dict(self.estimators) for d in self.directions],
            "ground_truths": dict(self.ground_truths),
            "best_per_direction": self.best_per_direction,
            "k": self.k,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SelectionReport":
        dirs = tuple(DirectionResult.from_dict(d) for d in raw["directions"])
        return cls(
            directions=dirs,  # type: ignore[arg-type]
            ground_truths={k: float(v) for k, v in raw["ground_truths"].items()},
            estimators=tuple(raw["estimators"]),
            k=int(raw["k"]),
            seed=int(raw["seed"]),
            config=dict(raw.get("config", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        return cls.from_dict(json.loads(text))


def _evaluate_direction(
    situation: str,
    source: LoggedDataset,
    target: Policy,
    ground_truth: float,
    estimators: Sequence[EstimatorId],
    spec: SubsampleSpec,
    settings: EstimatorSettings,
    refit_per_subsample: bool,
    workers: int,
) -> DirectionResult:
    result = DirectionResult(situation, source.policy_id, target.id, ground_truth)
    if ground_truth == 0:
        result.undefined_reason = "ground truth is 0; relative RMSE is undefined"
        return result

    need_mu = any(needs(e)[0] for e in estimators)
    need_p = any(needs(e)[1] for e in estimators)
    full: Optional[Nuisance] = None
    if not refit_per_subsample:
        full = fit_nuisance(source, settings, need_mu, need_p)
    index_sets = subsample_indices(source.n, spec)

    def run_one(idx: np.ndarray) -> Dict[str, Union[float, str]]:
        sub = source.take(idx)
        nz = full.take(idx) if full is not None else fit_nuisance(sub, settings, need_mu, need_p)
        out: Dict[str, Union[float, str]] = {}
        for e in estimators:
            try:
                out[e.value] = estimate(e, sub, target, settings, nz).value
            except (OPEError, ValueError) as err:
                out[e.value] = f"{type(err).__name__}: {err}"
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_k = list(pool.map(run_one, index_sets))
    else:
        per_k = [run_one(idx) for idx in index_sets]

    # reduce strictly in k order so the result does not depend on scheduling
    for e in estimators:
        name = e.value
        values: List[float] = []
        for k, res in enumerate(per_k):
            v = res[name]
            if isinstance(v, str):
                result.failures[name] = f"subsample {k}: {v}"
                break
            values.append(v)
        if name in result.failures:
            continue
        result.estimates[name] = values
        result.rrmse[name] = relative_rmse(values, ground_truth)
    result.best = select_best(result.rrmse)
    return result


def run_selection(
    d_a: LoggedDataset,
    d_b: LoggedDataset,
    pi_a: Policy,
    pi_b: Policy,
    estimators: Sequence[Union[EstimatorId, str]] = OFF_POLICY_ESTIMATORS,
    spec: SubsampleSpec = SubsampleSpec(),
    settings: EstimatorSettings = EstimatorSettings(),
    refit_per_subsample: bool = True,
    workers: int = 1,
    config: Optional[Dict[str, Any]] = None,
) -> SelectionReport:
    """Cross-evaluate each estimator on the two logs and pick the best per direction.

    Parameters
    ----------
    d_a, d_b: LoggedDataset
        Logs collected by ``pi_a`` and ``pi_b`` respectively (checked via policy ids).
    estimators: sequence of EstimatorId or str
        Candidates among DM, IPW and DR.
    spec: SubsampleSpec
        How the K subsamples of each source log are drawn.
    settings: EstimatorSettings
        Outcome-model family, regularization and propensity source.
    refit_per_subsample: bool, default=True
        Refit nuisance models on every subsample; otherwise fit once on the
        full source log and reuse the per-row predictions.
    workers: int, default=1
        Threads used for subsample evaluation. Results do not depend on it.
    config: dict, optional
        Echoed verbatim into the report.

    Returns
    -------
    SelectionReport
    """
    if d_a.n == 0 or d_b.n == 0:
        raise ValueError("both logs must be non-empty")
    if d_a.policy_id != pi_a.id:
        raise ValueError(f"dataset A was logged by {d_a.policy_id!r}, not by policy {pi_a.id!r}")
    if d_b.policy_id != pi_b.id:
        raise ValueError(f"dataset B was logged by {d_b.policy_id!r}, not by policy {pi_b.id!r}")
    ids = [EstimatorId(e) for e in estimators]
    if not ids or any(e not in OFF_POLICY_ESTIMATORS for e in ids):
        raise ValueError("estimators must be a non-empty subset of DM, IPW, DR")
    ids = [e for e in OFF_POLICY_ESTIMATORS if e in ids]

    v_a = on_policy_estimate(d_a).value
    v_b = on_policy_estimate(d_b).value
    directions = (
        _evaluate_direction(SITUATION_A_TO_B, d_a, pi_b, v_b, ids, spec, settings, refit_per_subsample, workers),
        _evaluate_direction(SITUATION_B_TO_A, d_b, pi_a, v_a, ids, spec, settings, refit_per_subsample, workers),
    )
    return SelectionReport(
        directions=directions,
        ground_truths={"pi_A": v_a, "pi_B": v_b},
        estimators=tuple(e.value for e in ids),
        k=spec.k,
        seed=spec.seed,
        config=dict(config or {}),
    )
