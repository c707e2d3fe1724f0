"""Outcome regressors and propensity models for DM/IPW/DR.

The outcome model is a per-treatment (T-learner) linear model: ridge for
continuous outcomes, L2-regularized logistic regression for binary ones.
Propensities come from a multinomial logistic fit of treatment on context
(plain logistic when m=2). Both solvers are exact: ridge uses the normal
equations, logistic uses Newton's method with step halving.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .data import LoggedDataset, OutcomeKind, Row, _sigmoid
from .exceptions import ModelFitError

DEFAULT_LAMBDA = 1e-6
DEFAULT_CLIP_FLOOR = 0.01
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 500


class OutcomeFamily(str, Enum):
    RIDGE_LINEAR = "ridge_linear"
    LOGISTIC = "logistic"


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _penalty(p: int) -> np.ndarray:
    # the intercept (first coordinate) is never penalized
    diag = np.ones(p)
    diag[0] = 0.0
    return np.diag(diag)


# --------------------------------------------------------------------------
# ridge
# --------------------------------------------------------------------------


def ridge_normal_equations(X1: np.ndarray, y: np.ndarray, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(A, b)`` with ``A = X1'X1 + lam*P`` and ``b = X1'y``; P zeroes the intercept."""
    A = X1.T @ X1 + lam * _penalty(X1.shape[1])
    b = X1.T @ y
    return A, b


def solve_ridge(X1: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    A, b = ridge_normal_equations(X1, y, lam)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        hint = " (use lambda > 0)" if lam == 0 else ""
        raise np.linalg.LinAlgError(f"singular normal equations{hint}")
    w = np.linalg.solve(A, b)
    # one step of iterative refinement tightens the residual for badly scaled data
    w = w + np.linalg.solve(A, b - A @ w)
    return w


# --------------------------------------------------------------------------
# multinomial / binary logistic
# --------------------------------------------------------------------------


def softmax_objective(W: np.ndarray, X1: np.ndarray, labels: np.ndarray, lam: float) -> float:
    """Negative L2-penalized multinomial log-likelihood.

    ``W`` has one row of d+1 weights per class; row 0 is the reference class
    and is held at zero by the solver. Intercepts are not penalized.
    """
    Z = X1 @ W.T
    lse = np.logaddexp.reduce(Z, axis=1)
    ll = np.sum(Z[np.arange(len(labels)), labels] - lse)
    return float(-ll + 0.5 * lam * np.sum(W[:, 1:] ** 2))


def _class_probs(W: np.ndarray, X1: np.ndarray) -> np.ndarray:
    Z = X1 @ W.T
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def softmax_gradient(W: np.ndarray, X1: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of :func:`softmax_objective` with respect to every entry of ``W``."""
    P = _class_probs(W, X1)
    Y = np.zeros_like(P)
    Y[np.arange(len(labels)), labels] = 1.0
    G = (P - Y).T @ X1
    G[:, 1:] += lam * W[:, 1:]
    return G


def logistic_objective(w: np.ndarray, X1: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Negative L2-penalized Bernoulli log-likelihood of ``y`` under ``sigmoid(X1 w)``."""
    z = X1 @ w
    ll = np.sum(y * z - np.logaddexp(0.0, z))
    return float(-ll + 0.5 * lam * np.sum(w[1:] ** 2))


def logistic_gradient(w: np.ndarray, X1: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    g = X1.T @ (_sigmoid(X1 @ w) - y)
    g[1:] += lam * w[1:]
    return g


def _hessian_blocks(W: np.ndarray, X1: np.ndarray, lam: float) -> np.ndarray:
    # Hessian over the free classes 1..m-1, flattened class-major
    P = _class_probs(W, X1)[:, 1:]
    k, p = P.shape[1], X1.shape[1]
    H = np.empty((k * p, k * p))
    pen = lam * _penalty(p)
    for a in range(k):
        for b in range(a, k):
            s = P[:, a] * ((a == b) - P[:, b])
            block = X1.T @ (X1 * s[:, None])
            if a == b:
                block = block + pen
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = block
            H[b * p:(b + 1) * p, a * p:(a + 1) * p] = block.T
    return H


@dataclass(frozen=True)
class NewtonResult:
    weights: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float


def fit_softmax_newton(
    X1: np.ndarray,
    labels: np.ndarray,
    m: int,
    lam: float,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> NewtonResult:
    """Newton's method with step halving for the multinomial logit.

    Stops when the max-norm of the gradient is at most ``tol`` or after
    ``max_iter`` iterations, whichever comes first. When m=2 this is
    ordinary logistic regression with weights ``W[1]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    p = X1.shape[1]
    W = np.zeros((m, p))
    f = softmax_objective(W, X1, labels, lam)
    g = softmax_gradient(W, X1, labels, lam)[1:].ravel()
    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol:
            return NewtonResult(W, it, True, gnorm)
        H = _hessian_blocks(W, X1, lam)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        it += 1
        t = 1.0
        improved = False
        for _ in range(60):
            W_new = W.copy()
            W_new[1:] -= t * step.reshape(m - 1, p)
            f_new = softmax_objective(W_new, X1, labels, lam)
            if f_new <= f:
                improved = True
                break
            t *= 0.5
        if not improved:
            # no representable decrease left; we are at the floating-point optimum
            break
        stalled = f_new == f
        W, f = W_new, f_new
        g = softmax_gradient(W, X1, labels, lam)[1:].ravel()
        if stalled and float(np.max(np.abs(g))) > tol:
            break
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return NewtonResult(W, it, gnorm <= tol, gnorm)


# --------------------------------------------------------------------------
# outcome model
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Fitted per-treatment regressor for the expected outcome.

    Parameters
    ----------
    weights: np.ndarray, shape (m, d+1)
        Row t holds ``[intercept, coefficients...]`` for treatment t.
    family: OutcomeFamily
    lam: float
        L2 penalty applied to non-intercept weights.
    fitted: tuple of bool
        Which treatment arms carry a fitted weight vector.
    """

    weights: np.ndarray
    family: OutcomeFamily
    lam: float
    fitted: Tuple[bool, ...]

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2:
            raise ValueError("weights must be a (m, d+1) matrix")
        if not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite")
        W.flags.writeable = False
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "family", OutcomeFamily(self.family))
        object.__setattr__(self, "fitted", tuple(bool(f) for f in self.fitted))

    @classmethod
    def from_weights(cls, weights, family="ridge_linear", lam: float = 0.0) -> "OutcomeModel":
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        return cls(W, family, lam, (True,) * W.shape[0])

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1] - 1

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        """Predictions for every context and treatment, shape (n, m).

        Columns of unfitted arms are NaN.
        """
        X1 = add_intercept(contexts)
        if X1.shape[1] != self.weights.shape[1]:
            raise ValueError(f"context dimension {X1.shape[1] - 1} does not match model d={self.d}")
        Z = X1 @ self.weights.T
        out = _sigmoid(Z) if self.family is OutcomeFamily.LOGISTIC else Z
        out[:, [not f for f in self.fitted]] = np.nan
        return out


def fit_outcome_model(
    dataset: LoggedDataset,
    family: Union[OutcomeFamily, str] = OutcomeFamily.RIDGE_LINEAR,
    lam: float = DEFAULT_LAMBDA,
) -> OutcomeModel:
    """Fit one regression per treatment arm on the rows that received it.

    Raises
    ------
    ModelFitError
        If a treatment arm has no rows, if the normal equations are singular
        (suggests lambda > 0), or if logistic is requested for non-binary outcomes.
    """
    family = OutcomeFamily(family)
    if lam < 0:
        raise ModelFitError(f"lambda must be nonnegative, got {lam}")
    if dataset.n == 0:
        raise ModelFitError("cannot fit an outcome model on an empty dataset")
    if family is OutcomeFamily.LOGISTIC and dataset.outcome_kind is not OutcomeKind.BINARY:
        raise ModelFitError("logistic outcome model requires outcome_kind=binary")
    X1 = add_intercept(dataset.X)
    W = np.zeros((dataset.m, X1.shape[1]))
    for arm in range(dataset.m):
        mask = dataset.treatments == arm
        if not mask.any():
            raise ModelFitError(f"treatment arm {arm} has no rows; its outcome model is undefined")
        Xa, ya = X1[mask], dataset.outcomes[mask]
        if family is OutcomeFamily.RIDGE_LINEAR:
            try:
                W[arm] = solve_ridge(Xa, ya, lam)
            except np.linalg.LinAlgError as e:
                raise ModelFitError(f"treatment arm {arm}: {e}") from None
        else:
            W[arm] = fit_softmax_newton(Xa, ya.astype(np.int64), 2, lam).weights[1]
    return OutcomeModel(W, family, lam, (True,) * dataset.m)


def predict_outcome(model: OutcomeModel, context: Sequence[float], treatment: int) -> float:
    """Predicted outcome for a single (context, treatment) pair."""
    if not 0 <= treatment < model.m or not model.fitted[treatment]:
        raise ModelFitError(f"treatment arm {treatment} was never fitted")
    ctx = np.asarray(context, dtype=float).reshape(1, -1)
    if ctx.shape[1] != model.d:
        raise ValueError(f"context has length {ctx.shape[1]}, model expects d={model.d}")
    return float(model.predict(ctx)[0, treatment])


def cross_fit(
    dataset: LoggedDataset,
    folds: int,
    family: Union[OutcomeFamily, str] = OutcomeFamily.RIDGE_LINEAR,
    lam: float = DEFAULT_LAMBDA,
    seed: int = 0,
) -> np.ndarray:
    """Out-of-fold outcome predictions, shape (n, m).

    Rows are shuffled with ``seed`` and split into ``folds`` near-equal blocks;
    each block is predicted by a model fitted on the remaining blocks.
    """
    n = dataset.n
    if folds < 2:
        raise ValueError("cross-fitting needs at least 2 folds")
    if folds > n:
        raise ValueError(f"folds={folds} exceeds the number of rows n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty((n, dataset.m))
    for k, held in enumerate(np.array_split(perm, folds)):
        train = np.ones(n, dtype=bool)
        train[held] = False
        try:
            model = fit_outcome_model(dataset.take(np.flatnonzero(train)), family, lam)
        except ModelFitError as e:
            raise ModelFitError(f"fold {k}: {e}") from None
        out[held] = model.predict(dataset.X[held])
    return out


# --------------------------------------------------------------------------
# propensities
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Multinomial logistic model of the behavior policy, clipped from below.

    ``weights`` has shape (m, d+1) with row 0 (the reference treatment) at zero.
    """

    weights: np.ndarray
    clip_floor: float = DEFAULT_CLIP_FLOOR

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        W.flags.writeable = False
        object.__setattr__(self, "weights", W)
        if not 0.0 < self.clip_floor <= 0.5:
            raise ValueError(f"clip_floor must lie in (0, 0.5], got {self.clip_floor}")

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def predict_raw(self, contexts: np.ndarray) -> np.ndarray:
        return _class_probs(self.weights, add_intercept(contexts))

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        """Clipped treatment probabilities, shape (n, m)."""
        return np.maximum(self.predict_raw(contexts), self.clip_floor)


def fit_propensity_model(
    dataset: LoggedDataset,
    clip_floor: float = DEFAULT_CLIP_FLOOR,
    lam: float = DEFAULT_LAMBDA,
) -> PropensityModel:
    """Fit treatment-given-context by penalized maximum likelihood."""
    if not 0.0 < clip_floor <= 0.5:
        raise ModelFitError(f"clip_floor must lie in (0, 0.5], got {clip_floor}")
    counts = np.bincount(dataset.treatments, minlength=dataset.m)
    for arm, c in enumerate(counts):
        if c == 0:
            raise ModelFitError(f"treatment {arm} never occurs; its propensity cannot be estimated")
    res = fit_softmax_newton(add_intercept(dataset.X), dataset.treatments, dataset.m, lam)
    return PropensityModel(res.weights, clip_floor)


def propensity(source: Optional[PropensityModel], row: Row) -> float:
    """Behavior propensity of ``row``'s logged treatment.

    The logged value wins when present; otherwise the model prediction is used.
    """
    if row.logged_propensity is not None:
        return float(row.logged_propensity)
    if source is None:
        raise ModelFitError("row has no logged propensity and no propensity model was given")
    return float(source.predict(np.asarray(row.context, dtype=float).reshape(1, -1))[0, row.treatment])


def resolve_propensities(dataset: LoggedDataset, model: Optional[PropensityModel] = None) -> np.ndarray:
    """Vectorized :func:`propensity` over every row of ``dataset``."""
    p = np.array(dataset.propensities, dtype=float)
    missing = np.isnan(p)
    if missing.any():
        if model is None:
            first = int(np.flatnonzero(missing)[0])
            raise ModelFitError(
                f"row {first + 1} has no logged propensity and no propensity model was given"
            )
        idx = np.flatnonzero(missing)
        probs = model.predict(dataset.X[idx])
        p[idx] = probs[np.arange(len(idx)), dataset.treatments[idx]]
    return p
