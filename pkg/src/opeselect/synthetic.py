"""Synthetic logged-bandit environments with known policy values.

Contexts are standard normal. Each treatment t has a mean outcome
``mu(x, t) = b_t + c_t . x + q_t . x**2`` (continuous, plus Gaussian noise)
or ``sigmoid`` of that (binary, Bernoulli draws). Every potential outcome is
drawn, so records carry both ``y0`` and ``y1`` while the logged dataset only
shows the one for the treatment the behavior policy picked.
"""
from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .data import LoggedDataset, OutcomeKind, Policy, Row, _sigmoid, policy_from_spec
from .estimators import EstimatorSettings, on_policy_estimate

SeedLike = Union[int, Sequence[int]]
MIN_EPSILON = 0.05


@dataclass(frozen=True, eq=False)
class SyntheticEnv:
    """Fully specified outcome process.

    Parameters
    ----------
    d: int
        Context dimension.
    outcome_kind: OutcomeKind
    intercepts: array-like, shape (m,)
    coef: array-like, shape (m, d)
        Linear coefficients per treatment.
    quad: array-like, shape (m, d), optional
        Coefficients on squared context features; zero gives an affine model.
    noise_sd: float
        Gaussian noise standard deviation (continuous outcomes only).
    epsilon: float
        Lower bound on every behavior-policy probability, at least 0.05.
    """

    d: int
    outcome_kind: OutcomeKind
    intercepts: np.ndarray
    coef: np.ndarray
    quad: Optional[np.ndarray] = None
    noise_sd: float = 1.0
    epsilon: float = MIN_EPSILON

    def __post_init__(self):
        b = np.array(self.intercepts, dtype=float).ravel()
        m = len(b)
        C = np.array(self.coef, dtype=float).reshape(m, self.d)
        Q = np.zeros((m, self.d)) if self.quad is None else np.array(self.quad, dtype=float).reshape(m, self.d)
        for a in (b, C, Q):
            a.flags.writeable = False
        object.__setattr__(self, "intercepts", b)
        object.__setattr__(self, "coef", C)
        object.__setattr__(self, "quad", Q)
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not MIN_EPSILON <= self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in [{MIN_EPSILON}, 0.5)")

    @property
    def m(self) -> int:
        return len(self.intercepts)

    def mean_outcome(self, contexts: np.ndarray) -> np.ndarray:
        """Expected outcome for every context and treatment, shape (n, m)."""
        X = np.asarray(contexts, dtype=float).reshape(-1, self.d)
        lin = self.intercepts + X @ self.coef.T + (X * X) @ self.quad.T
        if self.outcome_kind is OutcomeKind.BINARY:
            return _sigmoid(lin)
        return lin

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "outcome_kind": self.outcome_kind.value,
            "intercepts": self.intercepts.tolist(),
            "coef": self.coef.tolist(),
            "quad": self.quad.tolist(),
            "noise_sd": self.noise_sd,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SyntheticEnv":
        allowed = {"d", "outcome_kind", "intercepts", "coef", "quad", "noise_sd", "epsilon"}
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(
            d=int(raw["d"]),
            outcome_kind=raw["outcome_kind"],
            intercepts=raw["intercepts"],
            coef=raw["coef"],
            quad=raw.get("quad"),
            noise_sd=float(raw.get("noise_sd", 1.0)),
            epsilon=float(raw.get("epsilon", MIN_EPSILON)),
        )


@dataclass(frozen=True)
class SyntheticRecord:
    """A logged row together with every potential outcome."""

    context: Tuple[float, ...]
    treatment: int
    outcome: float
    logged_propensity: float
    potential_outcomes: Tuple[float, ...]

    @property
    def y0(self) -> float:
        return self.potential_outcomes[0]

    @property
    def y1(self) -> float:
        return self.potential_outcomes[1]

    @property
    def row(self) -> Row:
        return Row(self.context, self.treatment, self.outcome, self.logged_propensity)


class _Draw(NamedTuple):
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    p: np.ndarray
    potential: np.ndarray


def _simulate(env: SyntheticEnv, n: int, policy: Policy, rng: np.random.Generator) -> _Draw:
    if policy.m != env.m:
        raise ValueError(f"policy has m={policy.m}, environment has m={env.m}")
    X = rng.standard_normal((n, env.d))
    dist = policy.action_dist(X)
    if dist.min() < env.epsilon or dist.max() > 1.0 - env.epsilon * (env.m - 1) + 1e-12:
        raise ValueError(
            f"behavior policy {policy.id!r} leaves the overlap bound [{env.epsilon}, {1 - env.epsilon}]"
        )
    u = rng.random(n)
    t = np.minimum((dist.cumsum(axis=1) < u[:, None]).sum(axis=1), env.m - 1)
    mu = env.mean_outcome(X)
    if env.outcome_kind is OutcomeKind.BINARY:
        potential = (rng.random((n, env.m)) < mu).astype(float)
    else:
        potential = mu + env.noise_sd * rng.standard_normal((n, env.m))
    rows = np.arange(n)
    return _Draw(X, t, potential[rows, t], dist[rows, t], potential)


def _to_dataset(env: SyntheticEnv, draw: _Draw, policy: Policy) -> LoggedDataset:
    return LoggedDataset(
        contexts=draw.X,
        treatments=draw.t,
        outcomes=draw.y,
        propensities=draw.p,
        policy_id=policy.id,
        d=env.d,
        m=env.m,
        outcome_kind=env.outcome_kind,
    )


def generate(
    env: SyntheticEnv, n: int, policy: Policy, seed: SeedLike
) -> Tuple[LoggedDataset, List[SyntheticRecord]]:
    """Draw ``n`` i.i.d. logged rows under the behavior ``policy``.

    Logged propensities are the exact policy probabilities of the drawn
    treatments. The returned records keep all potential outcomes for oracle use.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    draw = _simulate(env, n, policy, np.random.default_rng(seed))
    records = [
        SyntheticRecord(
            tuple(draw.X[i].tolist()),
            int(draw.t[i]),
            float(draw.y[i]),
            float(draw.p[i]),
            tuple(draw.potential[i].tolist()),
        )
        for i in range(n)
    ]
    return _to_dataset(env, draw, policy), records


def generate_dataset(env: SyntheticEnv, n: int, policy: Policy, seed: SeedLike) -> LoggedDataset:
    """Like :func:`generate` without building the per-row records."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _to_dataset(env, _simulate(env, n, policy, np.random.default_rng(seed)), policy)


class MonteCarloValue(NamedTuple):
    value: float
    se: float
    mc_n: int


def true_policy_value(
    env: SyntheticEnv, policy: Policy, mc_n: int = 1_000_000, seed: SeedLike = 0, chunk: int = 200_000
) -> MonteCarloValue:
    """Monte Carlo value of ``policy``: mean of ``sum_t pi(t|x) mu(x, t)`` over fresh contexts."""
    if mc_n < 1:
        raise ValueError("mc_n must be >= 1")
    rng = np.random.default_rng(seed)
    shift = None
    s1 = s2 = 0.0
    done = 0
    while done < mc_n:
        size = min(chunk, mc_n - done)
        X = rng.standard_normal((size, env.d))
        v = (policy.action_dist(X) * env.mean_outcome(X)).sum(axis=1)
        if shift is None:
            # centering on the first draw keeps constant values exact and sums well conditioned
            shift = float(v[0])
        c = v - shift
        s1 += float(c.sum())
        s2 += float(c @ c)
        done += size
    mean_c = s1 / mc_n
    var = max(s2 - s1 * mean_c, 0.0) / (mc_n - 1) if mc_n > 1 else 0.0
    return MonteCarloValue(shift + mean_c, math.sqrt(var / mc_n), mc_n)


@dataclass(frozen=True)
class OracleResult:
    rmse: float
    bias: float
    sd: float
    truth: float
    replications: int
    estimates: Tuple[float, ...] = field(repr=False, default=())


EstimatorFn = Callable[[LoggedDataset, Policy], Any]


def oracle_study(
    env: SyntheticEnv,
    estimators: Mapping[str, EstimatorFn],
    target_policy: Policy,
    behavior_policy: Policy,
    n: int,
    replications: int,
    seed: int = 0,
    truth: Optional[float] = None,
    mc_n: int = 1_000_000,
    workers: int = 1,
) -> Dict[str, OracleResult]:
    """Brute-force RMSE of several estimators over fresh datasets.

    Replication r draws its dataset from the generator seeded with
    ``(seed, 0, r)``; every estimator sees the same datasets. ``truth``
    defaults to :func:`true_policy_value` with ``mc_n`` draws.
    """
    if replications < 2:
        raise ValueError("replications must be >= 2")
    if truth is None:
        truth = true_policy_value(env, target_policy, mc_n, seed=[seed, 1]).value

    def one(r: int) -> List[float]:
        ds = generate_dataset(env, n, behavior_policy, [seed, 0, r])
        return [float(f(ds, target_policy)) for f in estimators.values()]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(replications)))
    else:
        rows = [one(r) for r in range(replications)]
    values = np.array(rows, dtype=float).reshape(replications, len(estimators))
    out = {}
    for j, name in enumerate(estimators):
        v = values[:, j]
        err = v - truth
        out[name] = OracleResult(
            rmse=float(np.sqrt(np.mean(err**2))),
            bias=float(np.mean(err)),
            sd=float(np.std(v, ddof=1)),
            truth=float(truth),
            replications=replications,
            estimates=tuple(v.tolist()),
        )
    return out


def oracle_rmse(
    env: SyntheticEnv,
    estimator: EstimatorFn,
    target_policy: Policy,
    behavior_policy: Policy,
    n: int,
    replications: int,
    seed: int = 0,
    **kwargs,
) -> float:
    """Root-mean-squared deviation of ``estimator`` from the true value of ``target_policy``."""
    res = oracle_study(
        env, {"estimator": estimator}, target_policy, behavior_policy, n, replications, seed, **kwargs
    )
    return res["estimator"].rmse


def on_policy_estimator(dataset: LoggedDataset, policy: Policy) -> float:
    return on_policy_estimate(dataset).value


# --------------------------------------------------------------------------
# scenario presets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    """An environment, two behavior policies, and the log size for each."""

    name: str
    env: SyntheticEnv
    policy_a: Dict[str, Any]
    policy_b: Dict[str, Any]
    n: int
    settings: EstimatorSettings = EstimatorSettings()
    description: str = ""

    def policies(self) -> Tuple[Policy, Policy]:
        return (
            policy_from_spec(self.policy_a, m=self.env.m, id=self.policy_a.get("id", "A")),
            policy_from_spec(self.policy_b, m=self.env.m, id=self.policy_b.get("id", "B")),
        )

    def datasets(self, seed: int, n: Optional[int] = None) -> Tuple[LoggedDataset, LoggedDataset]:
        """Logs A and B for ``seed``; A uses generator ``(seed, 0)``, B uses ``(seed, 1)``."""
        pi_a, pi_b = self.policies()
        size = self.n if n is None else n
        return (
            generate_dataset(self.env, size, pi_a, [seed, 0]),
            generate_dataset(self.env, size, pi_b, [seed, 1]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "env": self.env.to_dict(),
            "policy_a": copy.deepcopy(self.policy_a),
            "policy_b": copy.deepcopy(self.policy_b),
            "n": self.n,
        }


def _s1() -> Scenario:
    # Binary outcome with a logistic truth, so the logistic outcome model is well
    # specified. Policy A treats users with extreme x0, policy B users near the
    # centre; the resulting importance weights are even in x0 and orthogonal to
    # the regressor's linear features, which is where DM's variance advantage is largest.
    env = SyntheticEnv(
        d=2,
        outcome_kind=OutcomeKind.BINARY,
        intercepts=[-0.2, 0.2],
        coef=[[0.4, 0.3], [-0.4, -0.2]],
        epsilon=0.05,
    )
    return Scenario(
        name="s1",
        env=env,
        policy_a={"id": "A", "type": "logistic", "intercept": -4.0, "coef": [0.0, 0.0],
                  "quad": [4.0, 0.0], "epsilon": 0.05},
        policy_b={"id": "B", "type": "logistic", "intercept": 4.0, "coef": [0.0, 0.0],
                  "quad": [-4.0, 0.0], "epsilon": 0.05},
        n=500,
        settings=EstimatorSettings(family="logistic"),
        description="binary outcome, well-specified logistic regressor, small n",
    )


def _s2() -> Scenario:
    # Continuous outcome, quadratic in x0, fitted by a linear ridge model: DM
    # extrapolates the linear fit between the centre and the tails and is badly
    # biased. The large outcome level inflates IPW's variance but cancels in DR.
    env = SyntheticEnv(
        d=2,
        outcome_kind=OutcomeKind.CONTINUOUS,
        intercepts=[10.0, 10.5],
        coef=[[0.5, 0.3], [-0.5, 0.2]],
        quad=[[0.5, 0.0], [-0.5, 0.0]],
        noise_sd=2.0,
        epsilon=0.05,
    )
    return Scenario(
        name="s2",
        env=env,
        policy_a={"id": "A", "type": "logistic", "intercept": -2.0, "coef": [0.0, 0.0],
                  "quad": [2.0, 0.0], "epsilon": 0.1},
        policy_b={"id": "B", "type": "logistic", "intercept": 2.0, "coef": [0.0, 0.0],
                  "quad": [-2.0, 0.0], "epsilon": 0.1},
        n=2000,
        settings=EstimatorSettings(family="ridge_linear"),
        description="continuous heavy-noise outcome, quadratic truth, misspecified linear regressor",
    )


SCENARIOS: Dict[str, Callable[[], Scenario]] = {"s1": _s1, "s2": _s2}


def scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


def scenario_from_dict(raw: Mapping[str, Any], base: Optional[Scenario] = None) -> Scenario:
    """Build a scenario from config, starting from ``base`` and overriding given keys."""
    allowed = {"name", "env", "policy_a", "policy_b", "n"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    if base is None and "env" not in raw:
        raise ValueError("a custom scenario needs an env")
    env = base.env if base is not None else None
    if "env" in raw:
        merged = dict(base.env.to_dict()) if base is not None else {}
        merged.update(raw["env"])
        env = SyntheticEnv.from_dict(merged)
    pa = dict(raw.get("policy_a", base.policy_a if base else {"id": "A", "type": "uniform"}))
    pb = dict(raw.get("policy_b", base.policy_b if base else {"id": "B", "type": "uniform"}))
    pa.setdefault("id", "A")
    pb.setdefault("id", "B")
    return Scenario(
        name=str(raw.get("name", base.name if base else "custom")),
        env=env,
        policy_a=pa,
        policy_b=pb,
        n=int(raw.get("n", base.n if base else 1000)),
        settings=base.settings if base else EstimatorSettings(),
        description=base.description if base else "",
    )
