import numpy as np
import pytest

from opeselect.data import LoggedDataset, policy_from_spec


def dataset(X, t, y, p=None, policy_id="A", m=2, kind="continuous", d=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return LoggedDataset(
        contexts=X,
        treatments=np.asarray(t),
        outcomes=np.asarray(y, dtype=float),
        propensities=None if p is None else np.asarray(p, dtype=float),
        policy_id=policy_id,
        d=X.shape[1] if d is None else d,
        m=m,
        outcome_kind=kind,
    )


def always(t, m=2, id="pi"):
    return policy_from_spec({"type": "constant", "treatment": t}, m=m, id=id)


def uniform(m=2, id="uniform"):
    return policy_from_spec({"type": "uniform"}, m=m, id=id)


def random_logged(rng, n, d=2, m=2, kind="continuous", policy=None, policy_id="A"):
    """Small random dataset whose logged propensities come from ``policy`` (uniform by default)."""
    policy = policy or uniform(m, id=policy_id)
    X = rng.normal(size=(n, d))
    dist = policy.action_dist(X)
    t = np.array([rng.choice(m, p=row) for row in dist])
    if kind == "binary":
        y = rng.integers(0, 2, size=n).astype(float)
    else:
        y = rng.normal(size=n) + t
    return dataset(X, t, y, dist[np.arange(n), t], policy_id=policy.id, m=m, kind=kind)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
