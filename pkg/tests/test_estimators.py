import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opeselect.data import policy_from_spec, policy_prob
from opeselect.estimators import (
    EstimatorId,
    EstimatorSettings,
    dm_estimate,
    dr_estimate,
    estimate,
    ipw_estimate,
    make_estimator,
    on_policy_estimate,
)
from opeselect.exceptions import EstimatorError
from opeselect.models import OutcomeModel

from conftest import always, dataset, random_logged, uniform


class TestOnPolicy:
    def test_examples(self):
        assert on_policy_estimate(dataset([[0]] * 4, [0, 1, 0, 1], [1, 0, 1, 0])).value == 0.5
        assert on_policy_estimate(dataset([[0]] * 5, [0] * 5, [3.25] * 5)).value == 3.25
        assert on_policy_estimate(dataset([[0]] * 2, [0, 1], [2.0, 4.0])).value == 3.0

    def test_empty(self):
        with pytest.raises(EstimatorError):
            on_policy_estimate(dataset(np.empty((0, 1)), [], []))


class TestDM:
    def test_constant_model(self, rng):
        ds = random_logged(rng, 7)
        mu = np.full((7, 2), 0.5)
        for pi in (always(0), always(1), uniform()):
            assert dm_estimate(ds, pi, mu).value == 0.5

    def test_two_rows_deterministic(self):
        ds = dataset([[1.0], [2.0]], [0, 0], [0.0, 0.0])
        mu = np.array([[9.0, 0.2], [9.0, 0.4]])
        assert dm_estimate(ds, always(1), mu).value == pytest.approx(0.3, abs=1e-15)

    def test_uniform_symmetry(self, rng):
        ds = random_logged(rng, 6)
        mu = np.tile([0.0, 1.0], (6, 1))
        assert dm_estimate(ds, uniform(), mu).value == 0.5

    def test_accepts_fitted_model(self):
        ds = dataset([[3.0]], [0], [0.0])
        model = OutcomeModel.from_weights([[0.0, 0.0], [1.0, 2.0]])
        assert dm_estimate(ds, always(1), model).value == 7.0

    def test_unfitted_arm_used_by_target(self):
        ds = dataset([[0.0]], [0], [0.0])
        mu = np.array([[0.1, np.nan]])
        assert dm_estimate(ds, always(0), mu).value == 0.1
        with pytest.raises(EstimatorError, match="arm 1"):
            dm_estimate(ds, always(1), mu)


class TestIPW:
    def test_weight_cancellation(self, rng):
        pi = policy_from_spec({"type": "logistic", "coef": [1.0, -1.0], "epsilon": 0.1}, id="A")
        ds = random_logged(rng, 50, policy=pi)
        ipw = ipw_estimate(ds, pi).value
        assert ipw == pytest.approx(on_policy_estimate(ds).value, abs=1e-12)

    def test_two_rows(self):
        ds = dataset([[0.0], [0.0]], [1, 0], [1.0, 0.0], [0.5, 0.5])
        assert ipw_estimate(ds, always(1)).value == 1.0

    def test_never_matching(self):
        ds = dataset([[0.0]] * 3, [0, 0, 0], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        assert ipw_estimate(ds, always(1)).value == 0.0

    def test_missing_logged_propensity(self):
        ds = dataset([[0.0]], [0], [1.0])
        with pytest.raises(EstimatorError, match="row 1"):
            ipw_estimate(ds, always(0))

    def test_explicit_array(self):
        ds = dataset([[0.0], [0.0]], [1, 1], [1.0, 3.0], [0.9, 0.9])
        assert ipw_estimate(ds, always(1), np.array([0.5, 0.25])).value == 7.0


class TestDR:
    def test_one_row(self):
        ds = dataset([[0.0]], [1], [1.0], [0.5])
        mu = np.array([[0.0, 0.4]])
        assert dr_estimate(ds, always(1), mu).value == pytest.approx(1.6, abs=1e-12)

    def test_reductions_over_random_datasets(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            ds = random_logged(rng, n, m=3, policy=uniform(3, id="A"))
            pi = policy_from_spec({"type": "softmax", "weights": rng.normal(size=(3, 3)).tolist()}, m=3)
            zero = np.zeros((n, 3))
            assert dr_estimate(ds, pi, zero).value == ipw_estimate(ds, pi).value
            # log only arms 0 and 1 so a target always choosing arm 2 has all-zero weights
            t01 = ds.treatments % 2
            logged = dataset(ds.X, t01, ds.outcomes, np.full(n, 0.5), m=3)
            mu = rng.normal(size=(n, 3))
            never = always(2, m=3)
            assert dr_estimate(logged, never, mu).value == dm_estimate(logged, never, mu).value

    def test_correct_model_gives_dm(self, rng):
        # a model that reproduces every logged outcome zeroes the correction
        ds = random_logged(rng, 20)
        mu = np.tile(ds.outcomes[:, None], (1, 2))
        pi = always(1)
        assert dr_estimate(ds, pi, mu).value == pytest.approx(dm_estimate(ds, pi, mu).value, abs=1e-12)


def loop_oracles(ds, pi, mu):
    """Row-by-row reference implementations using only policy_prob."""
    dm = ipw = dr = 0.0
    for i, r in enumerate(ds.rows):
        base = sum(policy_prob(pi, r.context, t) * mu[i][t] for t in range(ds.m))
        w = policy_prob(pi, r.context, r.treatment) / r.logged_propensity
        dm += base
        ipw += w * r.outcome
        dr += base + w * (r.outcome - mu[i][r.treatment])
    return dm / ds.n, ipw / ds.n, dr / ds.n


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 25))
def test_matches_row_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    behavior = policy_from_spec({"type": "logistic", "coef": rng.normal(size=2).tolist(), "epsilon": 0.05}, id="A")
    target = policy_from_spec({"type": "logistic", "coef": rng.normal(size=2).tolist(), "epsilon": 0.05}, id="B")
    ds = random_logged(rng, n, policy=behavior)
    mu = rng.normal(size=(n, 2))
    dm, ipw, dr = loop_oracles(ds, target, mu)
    assert dm_estimate(ds, target, mu).value == pytest.approx(dm, abs=1e-12)
    assert ipw_estimate(ds, target).value == pytest.approx(ipw, rel=1e-12, abs=1e-12)
    assert dr_estimate(ds, target, mu).value == pytest.approx(dr, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 25))
def test_dm_is_bounded_by_predictions(seed, n):
    rng = np.random.default_rng(seed)
    ds = random_logged(rng, n)
    mu = rng.normal(size=(n, 2)) * 10
    pi = policy_from_spec({"type": "logistic", "coef": rng.normal(size=2).tolist()}, id="B")
    v = dm_estimate(ds, pi, mu).value
    assert mu.min() - 1e-12 <= v <= mu.max() + 1e-12


class TestConfigured:
    def test_deterministic(self, rng):
        ds = random_logged(rng, 60, kind="binary")
        pi = always(1)
        s = EstimatorSettings(cross_fit_folds=3, seed=4)
        for name in ("DM", "IPW", "DR"):
            assert estimate(name, ds, pi, s).value == estimate(name, ds, pi, s).value

    def test_estimated_propensities_ignore_logged(self, rng):
        ds = random_logged(rng, 200)
        s = EstimatorSettings(propensity_source="estimated")
        a = estimate("IPW", ds, always(1), s).value
        b = estimate("IPW", ds.without_propensities(), always(1), s).value
        assert a == b

    def test_family_auto(self, rng):
        assert EstimatorSettings().resolve_family(random_logged(rng, 4, kind="binary")).value == "logistic"
        assert EstimatorSettings().resolve_family(random_logged(rng, 4)).value == "ridge_linear"

    def test_missing_arm_fails_dm_only(self):
        ds = dataset([[0.0], [1.0], [2.0]], [0, 0, 0], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        with pytest.raises(EstimatorError, match="outcome model unavailable"):
            estimate("DM", ds, always(1))
        assert estimate("IPW", ds, always(1)).value == 0.0

    def test_make_estimator(self, rng):
        ds = random_logged(rng, 30)
        f = make_estimator(EstimatorId.IPW)
        assert f(ds, always(0)) == ipw_estimate(ds, always(0)).value

    @pytest.mark.parametrize("bad", [{"propensity_source": "x"}, {"lam": -1.0}, {"cross_fit_folds": 1},
                                     {"clip_floor": 0.0}, {"family": "forest"}])
    def test_settings_validation(self, bad):
        with pytest.raises(ValueError):
            EstimatorSettings(**bad)
