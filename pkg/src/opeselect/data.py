"""Logged bandit feedback, decision policies, and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DataError

PROB_SUM_TOL = 1e-9


class OutcomeKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class PolicyKind(str, Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class Row:
    """A single logged interaction ``(context, treatment, outcome[, propensity])``."""

    context: Tuple[float, ...]
    treatment: int
    outcome: float
    logged_propensity: Optional[float] = None


@dataclass(frozen=True)
class Violation:
    """One broken dataset invariant.

    ``row`` is the 0-based row index, or None for dataset-level problems.
    Messages use 1-based row numbers so they line up with data lines in a CSV.
    """

    row: Optional[int]
    field: str
    reason: str

    def __str__(self) -> str:
        if self.row is None:
            return f"{self.field}: {self.reason}"
        return f"row {self.row + 1}: {self.field}: {self.reason}"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _context_array(contexts: Any, d: int) -> np.ndarray:
    if isinstance(contexts, np.ndarray) and contexts.dtype != object:
        arr = np.array(contexts, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, d) if d > 0 else arr.reshape(-1, 0)
        return arr
    if isinstance(contexts, np.ndarray) and contexts.dtype == object:
        items = list(contexts)
    else:
        items = [np.asarray(c, dtype=float).ravel() for c in contexts]
    lengths = {len(c) for c in items}
    if len(lengths) <= 1:
        width = lengths.pop() if lengths else d
        return np.array(items, dtype=float).reshape(len(items), width)
    ragged = np.empty(len(items), dtype=object)
    for i, c in enumerate(items):
        ragged[i] = np.asarray(c, dtype=float)
    return ragged


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Immutable table of logged bandit feedback collected by one behavior policy.

    Parameters
    ----------
    contexts: array-like, shape (n, d)
        Context vectors. Ragged input is kept as an object array so that
        :func:`validate` can report the offending rows.
    treatments: array-like of int, shape (n,)
        Logged treatment indices in ``{0, ..., m-1}``.
    outcomes: array-like of float, shape (n,)
        Observed outcomes. Binary outcomes are encoded as 0.0/1.0.
    propensities: array-like of float, shape (n,), optional
        Behavior-policy probability of the logged treatment; NaN marks a row
        without a logged value. None means no row has one.
    policy_id: str
        Identifier of the behavior policy that produced the log.
    d: int
        Declared context dimension.
    m: int, default=2
        Number of treatments.
    outcome_kind: OutcomeKind, default=continuous
    """

    contexts: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    propensities: Optional[np.ndarray]
    policy_id: str
    d: int
    m: int = 2
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS

    def __post_init__(self):
        contexts = _context_array(self.contexts, self.d)
        treatments = np.asarray(self.treatments)
        if treatments.dtype.kind == "f" and np.all(np.isfinite(treatments)) and np.all(treatments == np.round(treatments)):
            treatments = treatments.astype(np.int64)
        elif treatments.dtype.kind in "iub":
            treatments = treatments.astype(np.int64)
        outcomes = np.asarray(self.outcomes, dtype=float).ravel()
        n = len(outcomes)
        if self.propensities is None:
            propensities = np.full(n, np.nan)
        else:
            propensities = np.array(
                [np.nan if v is None else v for v in self.propensities]
                if not isinstance(self.propensities, np.ndarray)
                else self.propensities,
                dtype=float,
            ).ravel()
        if not (len(contexts) == len(treatments.ravel()) == n == len(propensities)):
            raise ValueError(
                "contexts, treatments, outcomes and propensities must have the same length"
            )
        object.__setattr__(self, "contexts", _readonly(contexts))
        object.__setattr__(self, "treatments", _readonly(treatments.ravel()))
        object.__setattr__(self, "outcomes", _readonly(outcomes))
        object.__setattr__(self, "propensities", _readonly(propensities))
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[Row],
        policy_id: str,
        d: int,
        m: int = 2,
        outcome_kind: Union[OutcomeKind, str] = OutcomeKind.CONTINUOUS,
    ) -> "LoggedDataset":
        rows = list(rows)
        return cls(
            contexts=[r.context for r in rows] if rows else np.empty((0, d)),
            treatments=np.array([r.treatment for r in rows], dtype=np.int64),
            outcomes=np.array([r.outcome for r in rows], dtype=float),
            propensities=np.array(
                [np.nan if r.logged_propensity is None else r.logged_propensity for r in rows],
                dtype=float,
            ),
            policy_id=policy_id,
            d=d,
            m=m,
            outcome_kind=outcome_kind,
        )

    @property
    def n(self) -> int:
        return len(self.outcomes)

    def __len__(self) -> int:
        return self.n

    @property
    def rows(self) -> Tuple[Row, ...]:
        out = []
        for i in range(self.n):
            p = self.propensities[i]
            out.append(
                Row(
                    context=tuple(float(v) for v in self.contexts[i]),
                    treatment=int(self.treatments[i]),
                    outcome=float(self.outcomes[i]),
                    logged_propensity=None if np.isnan(p) else float(p),
                )
            )
        return tuple(out)

    @property
    def X(self) -> np.ndarray:
        """Context matrix of shape (n, d); raises if rows are ragged."""
        if self.contexts.dtype == object:
            raise DataError("contexts are ragged; run validate() for details")
        return self.contexts

    @property
    def has_logged_propensities(self) -> bool:
        return self.n > 0 and not np.isnan(self.propensities).any()

    def take(self, indices: Sequence[int]) -> "LoggedDataset":
        """Return the sub-dataset made of ``indices`` (repeats allowed), in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return LoggedDataset(
            contexts=self.contexts[idx],
            treatments=self.treatments[idx],
            outcomes=self.outcomes[idx],
            propensities=self.propensities[idx],
            policy_id=self.policy_id,
            d=self.d,
            m=self.m,
            outcome_kind=self.outcome_kind,
        )

    def with_propensities(self, propensities: Optional[np.ndarray]) -> "LoggedDataset":
        return LoggedDataset(
            contexts=self.contexts,
            treatments=self.treatments,
            outcomes=self.outcomes,
            propensities=propensities,
            policy_id=self.policy_id,
            d=self.d,
            m=self.m,
            outcome_kind=self.outcome_kind,
        )

    def without_propensities(self) -> "LoggedDataset":
        return self.with_propensities(None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LoggedDataset):
            return NotImplemented
        if (self.policy_id, self.d, self.m, self.outcome_kind) != (
            other.policy_id,
            other.d,
            other.m,
            other.outcome_kind,
        ):
            return False
        if self.contexts.dtype == object or other.contexts.dtype == object:
            same_ctx = self.n == other.n and all(
                np.array_equal(a, b) for a, b in zip(self.contexts, other.contexts)
            )
        else:
            same_ctx = np.array_equal(self.contexts, other.contexts)
        return (
            same_ctx
            and np.array_equal(self.treatments, other.treatments)
            and np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.propensities, other.propensities, equal_nan=True)
        )

    __hash__ = None


def validate(dataset: LoggedDataset) -> List[Violation]:
    """List every invariant the dataset breaks; an empty list means it is clean."""
    out: List[Violation] = []
    n = dataset.n
    if n == 0:
        out.append(Violation(None, "rows", "dataset is empty (n must be >= 1)"))
    if dataset.m < 1:
        out.append(Violation(None, "m", f"number of treatments must be >= 1, got {dataset.m}"))
    ragged = dataset.contexts.dtype == object
    treatments = dataset.treatments
    integral = treatments.dtype.kind in "iu"
    binary = dataset.outcome_kind is OutcomeKind.BINARY
    for i in range(n):
        ctx = dataset.contexts[i]
        if len(ctx) != dataset.d:
            out.append(
                Violation(i, "context", f"dimension {len(ctx)} does not match declared d={dataset.d}")
            )
        elif not np.all(np.isfinite(ctx)):
            out.append(Violation(i, "context", "non-finite value"))
        t = treatments[i]
        if not integral and not (np.isfinite(t) and float(t).is_integer()):
            out.append(Violation(i, "treatment", f"{float(t)!r} is not an integer index"))
        elif not 0 <= t < dataset.m:
            out.append(
                Violation(i, "treatment", f"{int(t)} outside treatment range {{0..{dataset.m - 1}}}")
            )
        y = dataset.outcomes[i]
        if not np.isfinite(y):
            out.append(Violation(i, "outcome", "non-finite value"))
        elif binary and y not in (0.0, 1.0):
            out.append(Violation(i, "outcome", f"{float(y)!r} not in {{0, 1}} for outcome_kind=binary"))
        p = dataset.propensities[i]
        if not np.isnan(p) and not 0.0 < p <= 1.0:
            out.append(Violation(i, "propensity", f"{float(p)!r} outside (0, 1]"))
    if ragged and n > 0 and not out:
        out.append(Violation(None, "context", "ragged context rows"))
    return out


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Policy:
    """A decision rule over contexts.

    Rules are batch functions: ``decide`` maps an (n, d) context matrix to n
    treatment indices, ``prob`` maps it to an (n, m) matrix of treatment
    probabilities. A deterministic policy has ``prob(x, t) = 1{t = decide(x)}``.

    Parameters
    ----------
    id: str
    kind: PolicyKind
    m: int
        Number of treatments.
    decide: callable, optional
        Required for deterministic policies.
    prob: callable, optional
        Required for stochastic policies.
    spec: dict, optional
        Declarative description (see :func:`policy_from_spec`); echoed in reports.
    """

    id: str
    kind: PolicyKind
    m: int = 2
    decide: Optional[Callable[[np.ndarray], np.ndarray]] = None
    prob: Optional[Callable[[np.ndarray], np.ndarray]] = None
    spec: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.DETERMINISTIC and self.decide is None:
            raise ValueError("deterministic policy needs a decide rule")
        if self.kind is PolicyKind.STOCHASTIC and self.prob is None:
            raise ValueError("stochastic policy needs a prob rule")

    @classmethod
    def deterministic(cls, id: str, decide, m: int = 2, spec=None) -> "Policy":
        return cls(id=id, kind=PolicyKind.DETERMINISTIC, m=m, decide=decide, spec=spec)

    @classmethod
    def stochastic(cls, id: str, prob, m: int = 2, spec=None) -> "Policy":
        return cls(id=id, kind=PolicyKind.STOCHASTIC, m=m, prob=prob, spec=spec)

    def action_dist(self, contexts: np.ndarray) -> np.ndarray:
        """Treatment probabilities for each context, shape (n, m)."""
        X = np.asarray(contexts, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        n = X.shape[0]
        if self.kind is PolicyKind.DETERMINISTIC:
            a = np.asarray(self.decide(X)).reshape(-1)
            if a.shape != (n,):
                raise ValueError(f"policy {self.id!r}: decide returned shape {a.shape}, expected ({n},)")
            if a.dtype.kind == "f":
                if not np.all(a == np.round(a)):
                    raise ValueError(f"policy {self.id!r}: decide returned non-integer treatments")
                a = a.astype(np.int64)
            if n and (a.min() < 0 or a.max() >= self.m):
                raise ValueError(f"policy {self.id!r}: decide returned treatment outside {{0..{self.m - 1}}}")
            dist = np.zeros((n, self.m))
            dist[np.arange(n), a] = 1.0
            return dist
        dist = np.asarray(self.prob(X), dtype=float)
        if dist.shape != (n, self.m):
            raise ValueError(f"policy {self.id!r}: prob returned shape {dist.shape}, expected ({n}, {self.m})")
        if n and (dist.min() < 0.0 or dist.max() > 1.0):
            raise ValueError(f"policy {self.id!r}: probabilities outside [0, 1]")
        if n and np.max(np.abs(dist.sum(axis=1) - 1.0)) > PROB_SUM_TOL:
            raise ValueError(f"policy {self.id!r}: probabilities do not sum to 1")
        return dist


def policy_prob(policy: Policy, context: Sequence[float], treatment: int) -> float:
    """Probability that ``policy`` assigns ``treatment`` to ``context``."""
    if not 0 <= treatment < policy.m:
        raise ValueError(f"treatment {treatment} outside {{0..{policy.m - 1}}}")
    ctx = np.asarray(context, dtype=float).reshape(1, -1)
    return float(policy.action_dist(ctx)[0, treatment])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_from_spec(spec: Mapping[str, Any], m: int = 2, id: Optional[str] = None) -> Policy:
    """Build a policy from a JSON-friendly description.

    Supported ``type`` values:

    - ``uniform``: equal probability for every treatment.
    - ``constant``: always ``treatment``.
    - ``logistic`` (m=2): ``P(t=1|x) = clip(sigmoid(intercept + coef.x + quad.x**2), epsilon, 1-epsilon)``;
      ``quad`` is optional.
    - ``softmax``: ``(1 - m*epsilon) * softmax(W [1, x]) + epsilon``; ``weights`` is m rows of d+1.
    - ``argmax``: deterministic ``argmax_t W [1, x]``.
    """
    spec = dict(spec)
    kind = spec.get("type")
    pid = id if id is not None else str(spec.get("id", kind))
    m = int(spec.get("m", m))
    if kind == "uniform":
        return Policy.stochastic(pid, lambda X: np.full((X.shape[0], m), 1.0 / m), m=m, spec=spec)
    if kind == "constant":
        t = int(spec["treatment"])
        if not 0 <= t < m:
            raise ValueError(f"constant policy treatment {t} outside {{0..{m - 1}}}")
        return Policy.deterministic(pid, lambda X: np.full(X.shape[0], t, dtype=np.int64), m=m, spec=spec)
    if kind == "logistic":
        if m != 2:
            raise ValueError("logistic policy requires m=2")
        b = float(spec.get("intercept", 0.0))
        coef = np.asarray(spec.get("coef", []), dtype=float)
        quad = np.asarray(spec.get("quad", np.zeros_like(coef)), dtype=float)
        eps = float(spec.get("epsilon", 0.0))
        if not 0.0 <= eps < 0.5:
            raise ValueError("logistic policy epsilon must lie in [0, 0.5)")

        def prob(X):
            p1 = np.clip(_sigmoid(b + X @ coef + (X * X) @ quad), eps, 1.0 - eps)
            return np.column_stack([1.0 - p1, p1])

        return Policy.stochastic(pid, prob, m=2, spec=spec)
    if kind in ("softmax", "argmax"):
        W = np.asarray(spec["weights"], dtype=float)
        if W.ndim != 2 or W.shape[0] != m:
            raise ValueError(f"{kind} policy weights must have m={m} rows")

        def scores(X):
            return W[:, 0] + X @ W[:, 1:].T

        if kind == "argmax":
            return Policy.deterministic(pid, lambda X: np.argmax(scores(X), axis=1), m=m, spec=spec)
        eps = float(spec.get("epsilon", 0.0))
        if eps < 0 or m * eps > 1.0:
            raise ValueError("softmax policy epsilon must satisfy 0 <= m*epsilon <= 1")
        return Policy.stochastic(
            pid, lambda X: (1.0 - m * eps) * _softmax(scores(X)) + eps, m=m, spec=spec
        )
    raise ValueError(f"unknown policy type {kind!r}")


# --------------------------------------------------------------------------
# CSV interchange
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column mapping from a CSV file onto a :class:`LoggedDataset`."""

    context_columns: Tuple[str, ...]
    policy_id: str
    treatment_column: str = "t"
    outcome_column: str = "y"
    propensity_column: Optional[str] = None
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS
    m: int = 2

    def __post_init__(self):
        object.__setattr__(self, "context_columns", tuple(self.context_columns))
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))

    @property
    def d(self) -> int:
        return len(self.context_columns)

    @classmethod
    def canonical(
        cls,
        d: int,
        policy_id: str,
        outcome_kind: Union[OutcomeKind, str] = OutcomeKind.CONTINUOUS,
        m: int = 2,
        with_propensity: bool = True,
    ) -> "Schema":
        return cls(
            context_columns=tuple(f"x{j}" for j in range(d)),
            policy_id=policy_id,
            propensity_column="p" if with_propensity else None,
            outcome_kind=outcome_kind,
            m=m,
        )

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Schema":
        allowed = {
            "context_columns", "d", "policy_id", "treatment_column", "outcome_column",
            "propensity_column", "outcome_kind", "m",
        }
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        if "context_columns" in raw:
            cols = tuple(raw["context_columns"])
            if "d" in raw and int(raw["d"]) != len(cols):
                raise ValueError(f"schema declares d={raw['d']} but names {len(cols)} context columns")
        elif "d" in raw:
            cols = tuple(f"x{j}" for j in range(int(raw["d"])))
        else:
            raise ValueError("schema needs context_columns or d")
        return cls(
            context_columns=cols,
            policy_id=str(raw.get("policy_id", "")),
            treatment_column=raw.get("treatment_column", "t"),
            outcome_column=raw.get("outcome_column", "y"),
            propensity_column=raw.get("propensity_column"),
            outcome_kind=raw.get("outcome_kind", "continuous"),
            m=int(raw.get("m", 2)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "context_columns": list(self.context_columns),
            "policy_id": self.policy_id,
            "treatment_column": self.treatment_column,
            "outcome_column": self.outcome_column,
            "propensity_column": self.propensity_column,
            "outcome_kind": self.outcome_kind.value,
            "m": self.m,
        }


def _parse_real(cell: str) -> float:
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(cell)
    return v


def read_dataset(path: Union[str, Path], schema: Schema) -> LoggedDataset:
    """Parse a CSV into a dataset without checking value-level invariants.

    Raises :class:`DataError` for unreadable structure: missing columns,
    non-numeric cells, non-integer treatments.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        col = {name: j for j, name in enumerate(header)}
        needed = list(schema.context_columns) + [schema.treatment_column, schema.outcome_column]
        if schema.propensity_column:
            needed.append(schema.propensity_column)
        missing = [c for c in needed if c not in col]
        if missing:
            raise DataError([f"{path}: missing column {c!r}" for c in missing])
        errors: List[str] = []
        contexts, treatments, outcomes, props = [], [], [], []
        for rowno, cells in enumerate(reader, start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                errors.append(f"row {rowno}: expected {len(header)} cells, found {len(cells)}")
                continue

            def real(name: str) -> Optional[float]:
                raw = cells[col[name]].strip()
                try:
                    return _parse_real(raw)
                except ValueError:
                    errors.append(f"row {rowno}: column {name!r}: non-numeric value {raw!r}")
                    return None

            ctx = [real(c) for c in schema.context_columns]
            t_raw = real(schema.treatment_column)
            y = real(schema.outcome_column)
            p = None
            if schema.propensity_column:
                raw = cells[col[schema.propensity_column]].strip()
                if raw:
                    p = real(schema.propensity_column)
            if t_raw is not None and not float(t_raw).is_integer():
                errors.append(
                    f"row {rowno}: column {schema.treatment_column!r}: treatment {t_raw!r} is not an integer"
                )
                t_raw = None
            if None in ctx or t_raw is None or y is None:
                continue
            contexts.append(ctx)
            treatments.append(int(t_raw))
            outcomes.append(y)
            props.append(np.nan if p is None else p)
    if errors:
        raise DataError([f"{path}: {e}" for e in errors])
    return LoggedDataset(
        contexts=np.array(contexts, dtype=float).reshape(len(contexts), schema.d),
        treatments=np.array(treatments, dtype=np.int64),
        outcomes=np.array(outcomes, dtype=float),
        propensities=np.array(props, dtype=float),
        policy_id=schema.policy_id,
        d=schema.d,
        m=schema.m,
        outcome_kind=schema.outcome_kind,
    )


def load_dataset(path: Union[str, Path], schema: Schema) -> LoggedDataset:
    """Read and validate a CSV of logged feedback; row order follows the file.

    Raises
    ------
    DataError
        On missing columns, non-numeric cells, or any invariant violation,
        with one message per problem naming its 1-based data row.
    """
    dataset = read_dataset(path, schema)
    violations = validate(dataset)
    if violations:
        raise DataError([f"{path}: {v}" for v in violations])
    return dataset


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: LoggedDataset, path: Union[str, Path]) -> Schema:
    """Write ``dataset`` in the canonical CSV layout and return the matching schema.

    Columns are ``x0..x{d-1}, t, y`` plus ``p`` when any propensity is logged.
    Floats are written with ``repr`` so a reload is bit-exact.
    """
    with_p = not np.isnan(dataset.propensities).all() if dataset.n else False
    schema = Schema.canonical(
        dataset.d, dataset.policy_id, dataset.outcome_kind, dataset.m, with_propensity=with_p
    )
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        header = list(schema.context_columns) + ["t", "y"] + (["p"] if with_p else [])
        w.writerow(header)
        X = dataset.X
        for i in range(dataset.n):
            cells = [_fmt(v) for v in X[i]]
            cells += [str(int(dataset.treatments[i])), _fmt(dataset.outcomes[i])]
            if with_p:
                p = dataset.propensities[i]
                cells.append("" if np.isnan(p) else _fmt(p))
            w.writerow(cells)
    return schema
