"""Acceptance criteria 1-8.

Each test records one PASS/FAIL line (shown in the terminal summary) and then
asserts the same condition. Expensive oracle runs are module-scoped fixtures.
"""
import json
import subprocess
import sys

import numpy as np
import pytest

from opeselect.data import Policy
from opeselect.estimators import (
    dm_estimate,
    dr_estimate,
    ipw_estimate,
    make_estimator,
    on_policy_estimate,
)
from opeselect.models import (
    add_intercept,
    fit_outcome_model,
    logistic_gradient,
    logistic_objective,
    ridge_normal_equations,
    softmax_gradient,
    softmax_objective,
    solve_ridge,
)
from opeselect.selection import (
    SITUATION_A_TO_B,
    SITUATION_B_TO_A,
    SubsampleSpec,
    relative_rmse,
    run_selection,
)
from opeselect.synthetic import SyntheticEnv, oracle_study, scenario, true_policy_value

from conftest import always, dataset, record

REPS = 500
ORACLE_REPS = 10_000
SEEDS = range(1000, 1050)
K = 100

DIRECTIONS = (
    # situation, behavior index, target index
    (SITUATION_A_TO_B, 0, 1),
    (SITUATION_B_TO_A, 1, 0),
)


def table_policy(table, id="T"):
    """Stochastic policy reading pi(1|x) from a lookup keyed by the scalar context."""

    def prob(X):
        p1 = np.array([table[float(x[0])] for x in X])
        return np.column_stack([1.0 - p1, p1])

    return Policy.stochastic(id, prob, m=2)


# ---------------------------------------------------------------------------
# 1. hand oracles
# ---------------------------------------------------------------------------


def test_criterion_1_hand_oracles():
    # Three rows, target pi(1|x) = 0.5, 0.75, 0.25.
    #   (t, y, p) = (1, 2.0, 0.8), (0, 1.0, 0.25), (1, 0.0, 0.5)
    #   mu = (0.5, 1.5), (1.0, 2.0), (0.0, 1.0)
    # DM rows: 0.5*0.5 + 0.5*1.5 = 1.0; 0.25*1 + 0.75*2 = 1.75; 0.75*0 + 0.25*1 = 0.25 -> 3.0/3 = 1.0
    # weights: 0.5/0.8 = 0.625; 0.25/0.25 = 1; 0.25/0.5 = 0.5
    # IPW: (0.625*2 + 1*1 + 0.5*0)/3 = 2.25/3 = 0.75
    # DR corrections: 0.625*(2-1.5) = 0.3125; 1*(1-1) = 0; 0.5*(0-1) = -0.5 -> (3.0 - 0.1875)/3 = 0.9375
    three = dataset([[0.0], [1.0], [2.0]], [1, 0, 1], [2.0, 1.0, 0.0], [0.8, 0.25, 0.5])
    pi = table_policy({0.0: 0.5, 1.0: 0.75, 2.0: 0.25})
    mu3 = np.array([[0.5, 1.5], [1.0, 2.0], [0.0, 1.0]])

    cases = [
        ("on-policy [1,0,1,0]", on_policy_estimate(dataset([[0]] * 4, [0, 1, 0, 1], [1, 0, 1, 0])).value, 0.5),
        ("on-policy [2,4]", on_policy_estimate(dataset([[0]] * 2, [0, 1], [2.0, 4.0])).value, 3.0),
        ("on-policy 3 rows", on_policy_estimate(three).value, 1.0),
        ("DM 2 rows", dm_estimate(dataset([[1.0], [2.0]], [0, 0], [0, 0]), always(1),
                                  np.array([[0.0, 0.2], [0.0, 0.4]])).value, 0.3),
        ("DM 3 rows", dm_estimate(three, pi, mu3).value, 1.0),
        ("IPW 2 rows", ipw_estimate(dataset([[0.0]] * 2, [1, 0], [1.0, 0.0], [0.5, 0.5]), always(1)).value, 1.0),
        ("IPW 3 rows", ipw_estimate(three, pi).value, 0.75),
        ("DR 1 row", dr_estimate(dataset([[0.0]], [1], [1.0], [0.5]), always(1),
                                 np.array([[0.0, 0.4]])).value, 1.6),
        ("DR 3 rows", dr_estimate(three, pi, mu3).value, 0.9375),
        ("rRMSE exact", relative_rmse([1.0, 1.0], 1.0), 0.0),
        ("rRMSE symmetric", relative_rmse([1.1, 0.9], 1.0), 0.1),
        ("rRMSE single", relative_rmse([2.0], 1.0), 1.0),
        # errors -0.5, 0.5, 1.0 -> mean square 0.5 -> sqrt(0.5)
        ("rRMSE three", relative_rmse([0.5, 1.5, 2.0], 1.0), 0.7071067811865476),
        # relative errors -0.4, -0.2, -0.3 -> mean square 0.29/3
        ("rRMSE scaled", relative_rmse([0.9, 1.2, 1.05], 1.5), 0.31091263510296048),
    ]
    worst = max(abs(got - want) for _, got, want in cases)
    bad = [name for name, got, want in cases if abs(got - want) > 1e-12]
    ok = record(1, not bad, f"{len(cases)} hand-computed values, max abs error {worst:.1e}"
                + (f", off: {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------------------
# 2 and 3. unbiasedness / double robustness
# ---------------------------------------------------------------------------


def bias_check(result):
    se = result.sd / np.sqrt(result.replications)
    return abs(result.bias) <= 3 * se, result.bias, se


def test_criterion_2_ipw_unbiased():
    s1 = scenario("s1")
    pi_a, pi_b = s1.policies()
    truth = true_policy_value(s1.env, pi_b, mc_n=2_000_000, seed=11)
    res = oracle_study(s1.env, {"IPW": make_estimator("IPW")}, pi_b, pi_a, 2000, REPS, seed=21,
                       truth=truth.value)["IPW"]
    ok, bias, se = bias_check(res)
    record(2, ok, f"S1 D_A -> pi_B, n=2000, {REPS} reps: bias {bias:+.5f}, 3 SE = {3 * se:.5f}")
    assert ok


def affine_env():
    # S2 without the squared terms, so the linear ridge model is correctly specified
    raw = scenario("s2").env.to_dict()
    raw["quad"] = [[0.0, 0.0], [0.0, 0.0]]
    return SyntheticEnv.from_dict(raw)


def dr_constant_propensity(ds, policy):
    model = fit_outcome_model(ds, "ridge_linear", lam=1e-6)
    return dr_estimate(ds, policy, model, np.full(ds.n, 0.5)).value


def ipw_constant_propensity(ds, policy):
    return ipw_estimate(ds, policy, np.full(ds.n, 0.5)).value


def test_criterion_3_double_robustness():
    s2 = scenario("s2")
    pi_a, pi_b = s2.policies()

    # (a) exact logged propensities, linear model of a quadratic truth
    truth_a = true_policy_value(s2.env, pi_b, mc_n=2_000_000, seed=12).value
    res_a = oracle_study(
        s2.env,
        {"DR": make_estimator("DR", s2.settings), "DM": make_estimator("DM", s2.settings)},
        pi_b, pi_a, 2000, REPS, seed=22, truth=truth_a,
    )
    ok_a, bias_a, se_a = bias_check(res_a["DR"])
    dm_biased = not bias_check(res_a["DM"])[0]

    # (b) correctly specified ridge model, propensities replaced by a constant 0.5
    env_b = affine_env()
    truth_b = true_policy_value(env_b, pi_b, mc_n=2_000_000, seed=13).value
    res_b = oracle_study(
        env_b, {"DR": dr_constant_propensity, "IPW": ipw_constant_propensity},
        pi_b, pi_a, 2000, REPS, seed=23, truth=truth_b,
    )
    ok_b, bias_b, se_b = bias_check(res_b["DR"])
    ipw_biased = not bias_check(res_b["IPW"])[0]

    ok = ok_a and ok_b
    record(3, ok,
           f"(a) misspecified model: DR bias {bias_a:+.4f} vs 3 SE {3 * se_a:.4f} (DM biased: {dm_biased}); "
           f"(b) wrong propensities: DR bias {bias_b:+.4f} vs 3 SE {3 * se_b:.4f} (IPW biased: {ipw_biased})")
    assert ok
    # each arm breaks the single-robust estimator, so the check has teeth
    assert dm_biased and ipw_biased


# ---------------------------------------------------------------------------
# 4 and 5. selection against the brute-force oracle
# ---------------------------------------------------------------------------


def oracle_table(name):
    scen = scenario(name)
    pols = scen.policies()
    estimators = {e: make_estimator(e, scen.settings) for e in ("DM", "IPW", "DR")}
    table = {}
    for k, (situation, b, t) in enumerate(DIRECTIONS):
        truth = true_policy_value(scen.env, pols[t], mc_n=2_000_000, seed=[30, k]).value
        res = oracle_study(scen.env, estimators, pols[t], pols[b], scen.n, ORACLE_REPS, seed=40 + k, truth=truth)
        table[situation] = {e: r.rmse for e, r in res.items()}
    return table


def selection_runs(name):
    scen = scenario(name)
    pi_a, pi_b = scen.policies()
    picks = {SITUATION_A_TO_B: [], SITUATION_B_TO_A: []}
    for seed in SEEDS:
        d_a, d_b = scen.datasets(seed)
        rep = run_selection(d_a, d_b, pi_a, pi_b, spec=SubsampleSpec(k=K, seed=seed), settings=scen.settings)
        for situation, best in rep.best_per_direction.items():
            picks[situation].append(best)
    return picks


@pytest.fixture(scope="module")
def s1_oracle():
    return oracle_table("s1")


@pytest.fixture(scope="module")
def s2_oracle():
    return oracle_table("s2")


@pytest.fixture(scope="module")
def s1_picks():
    return selection_runs("s1")


@pytest.fixture(scope="module")
def s2_picks():
    return selection_runs("s2")


def test_criterion_4_selection_matches_oracle(s1_oracle, s2_oracle, s1_picks, s2_picks):
    details, ok = [], True
    for name, table, picks in (("S1", s1_oracle, s1_picks), ("S2", s2_oracle, s2_picks)):
        for situation, rmse in table.items():
            ranked = sorted(rmse, key=rmse.get)
            best, runner = ranked[0], ranked[1]
            gap = rmse[runner] / rmse[best]
            hit = picks[situation].count(best) / len(picks[situation])
            this_ok = gap >= 2.0 and hit >= 0.8
            ok &= this_ok
            details.append(f"{name} {situation}: oracle best {best} ({gap:.2f}x runner-up {runner}), "
                           f"picked in {hit:.0%} of {len(picks[situation])} seeds")
    record(4, ok, "; ".join(details))
    assert ok


def test_criterion_5_qualitative_flip(s1_picks, s2_picks):
    # majority pick over the 50 seeds in every direction
    def majority(picks):
        return {s: max(set(v), key=v.count) for s, v in picks.items()}

    m1, m2 = majority(s1_picks), majority(s2_picks)
    ok = all(v == "DM" for v in m1.values()) and all(v in ("IPW", "DR") for v in m2.values())
    record(5, ok, f"S1 selects {sorted(set(m1.values()))}, S2 selects {sorted(set(m2.values()))}")
    assert ok


# ---------------------------------------------------------------------------
# 6. numerical fitting checks
# ---------------------------------------------------------------------------


def test_criterion_6_numerical_checks():
    rng = np.random.default_rng(6)
    h = 1e-5

    def fd(f, w):
        g = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[i] = h
            g[i] = (f(w + e) - f(w - e)) / (2 * h)
        return g

    worst = 0.0
    X1 = add_intercept(rng.normal(size=(200, 3)))
    y = rng.integers(0, 2, size=200).astype(float)
    labels = rng.integers(0, 3, size=200)
    for _ in range(10):
        w = rng.normal(size=4)
        ana = logistic_gradient(w, X1, y, 0.1)
        num = fd(lambda v: logistic_objective(v, X1, y, 0.1), w)
        worst = max(worst, np.linalg.norm(ana - num) / np.linalg.norm(ana))
        W = rng.normal(size=(3, 4))
        ana = softmax_gradient(W, X1, labels, 0.1)
        num = fd(lambda v: softmax_objective(v, X1, labels, 0.1), W)
        worst = max(worst, np.linalg.norm(ana - num) / np.linalg.norm(ana))

    residual = 0.0
    for lam in (0.0, 1e-6, 1.0):
        Xr = add_intercept(rng.normal(scale=[1.0, 50.0, 0.01], size=(500, 3)))
        yr = rng.normal(size=500) * 10
        wr = solve_ridge(Xr, yr, lam)
        A, b = ridge_normal_equations(Xr, yr, lam)
        residual = max(residual, float(np.max(np.abs(A @ wr - b))))

    ok = worst <= 1e-6 and residual <= 1e-8
    record(6, ok, f"gradient rel. error {worst:.1e} (<= 1e-6), ridge residual {residual:.1e} (<= 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 7. determinism
# ---------------------------------------------------------------------------


def run_cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "opeselect", *args], cwd=cwd, capture_output=True, text=True)


def test_criterion_7_determinism(tmp_path):
    outputs = {}
    for label, workers in (("first", 1), ("second", 1), ("threads", 4)):
        cfg = {"scenario": {"name": "s2", "n": 600}, "seed": 5, "workers": workers,
               "subsample": {"k": 30}, "synth": {"mc_n": 50_000, "oracle_replications": 40}}
        path = tmp_path / f"{label}.json"
        path.write_text(json.dumps(cfg))
        run_out, synth_out = tmp_path / f"run_{label}", tmp_path / f"synth_{label}"
        procs = [
            run_cli(["run", "--config", str(path), "--format", "json", "--out", str(run_out)], tmp_path),
            run_cli(["synth", "--config", str(path), "--oracle", "--out", str(synth_out)], tmp_path),
        ]
        assert all(p.returncode == 0 for p in procs), [p.stderr for p in procs]
        outputs[label] = (
            procs[0].stdout,
            (run_out / "report.json").read_bytes(),
            (synth_out / "truth.json").read_bytes(),
            (synth_out / "dataset_a.csv").read_bytes(),
            (synth_out / "dataset_b.csv").read_bytes(),
        )
    same_runs = outputs["first"] == outputs["second"]
    same_threads = outputs["first"] == outputs["threads"]
    ok = same_runs and same_threads
    record(7, ok, f"run/synth JSON byte-identical across invocations: {same_runs}, "
                  f"across workers=1/4: {same_threads}")
    assert ok


# ---------------------------------------------------------------------------
# 8. root-n consistency
# ---------------------------------------------------------------------------


def test_criterion_8_root_n():
    s2 = scenario("s2")
    pi_a, pi_b = s2.policies()
    truth = true_policy_value(s2.env, pi_b, mc_n=2_000_000, seed=14).value
    ipw = {"IPW": make_estimator("IPW")}
    small = oracle_study(s2.env, ipw, pi_b, pi_a, 1000, 2000, seed=81, truth=truth)["IPW"].rmse
    large = oracle_study(s2.env, ipw, pi_b, pi_a, 2000, 2000, seed=82, truth=truth)["IPW"].rmse
    ratio = small / large
    ok = 1.25 <= ratio <= 1.60
    record(8, ok, f"IPW oracle RMSE n=1000 {small:.4f}, n=2000 {large:.4f}, ratio {ratio:.3f} in [1.25, 1.60]")
    assert ok
