import numpy as np
import pytest

from sdac import gradinteg as gi
from sdac.gradinteg import RecoveryProblem

from qp_oracles import min_norm_qp


def ident(v):
    return v


def test_zero_direction_when_already_satisfied():
    g = gi.qp_direction(np.eye(2), np.array([-1.0, -0.5]), np.eye(2))
    np.testing.assert_array_equal(g, 0.0)


def test_single_constraint_example():
    g = gi.qp_direction(np.array([[1.0]]), np.array([1.0]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(g, [-1.0, 0.0], atol=1e-12)


def test_separable_example():
    g = gi.qp_direction(np.eye(2), np.array([1.0, 1.0]), np.eye(2))
    np.testing.assert_allclose(g, [-1.0, -1.0], atol=1e-12)


def random_recovery(rng):
    n = int(rng.integers(2, 11))
    K = int(rng.integers(1, min(3, n) + 1))
    A = rng.normal(size=(n, n))
    H = A @ A.T / n + 0.1 * np.eye(n)
    G = rng.normal(size=(K, n))
    F = rng.uniform(0.0, 2.0, size=K)
    d = rng.uniform(0.2, 1.0, size=K)
    return H, RecoveryProblem(G, F, d, 0.1, lambda v: H @ v, float(rng.uniform(0.05, 1.0)))


@pytest.mark.parametrize("seed", range(60))
def test_direction_matches_dense_qp(seed):
    rng = np.random.default_rng(seed)
    H, p = random_recovery(rng)
    g = gi.recovery_direction(p)
    c = p.offsets()
    want = min_norm_qp(H, p.G, c)
    np.testing.assert_allclose(g, want, atol=1e-5)
    scale = max(1.0, np.max(np.abs(c)))
    assert np.max(p.G @ g + c) <= 1e-6 * scale


def test_truncated_offsets():
    p = RecoveryProblem(np.array([[3.0, 4.0], [1.0, 0.0]]), np.array([10.0, 0.2]), np.array([1.0, 0.5]),
                        0.1, ident, 0.5)
    # reach sqrt(2 eps) |g| = 5 and 1; value terms 9.1 and -0.2
    np.testing.assert_allclose(p.offsets(), [5.0, -0.2])


def test_step_examples():
    p = RecoveryProblem(np.array([[1.0, 0.0]]), [1.0], [0.5], 0.1, ident, 0.5)
    np.testing.assert_allclose(gi.recovery_step(np.zeros(2), p, np.array([-2.0, 0.0])), [-1.0, 0.0])
    np.testing.assert_array_equal(gi.recovery_step(np.ones(2), p, np.zeros(2)), np.ones(2))


@pytest.mark.parametrize("seed", range(20))
def test_step_stays_in_trust_region(seed):
    rng = np.random.default_rng(seed)
    H, p = random_recovery(rng)
    x0 = rng.normal(size=H.shape[0])
    delta = gi.recovery_step(x0, p) - x0
    assert 0.5 * delta @ H @ delta <= p.eps * (1 + 1e-9)


def test_dual_failure_raises_with_diagnostics():
    with pytest.raises(gi.RecoveryError, match="KKT"):
        gi.qp_direction(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.array([1.0, 1.0]),
                        np.array([[1.0, 0.0], [-1.0, 0.0]]), max_iter=50)


def test_toy_reaches_feasibility():
    problem = gi.toy_problem()
    trace = gi.recover_until_feasible(problem, gi.TOY_START, 0.5, 0.1, max_iters=50)
    assert not trace[0].feasible and trace[-1].feasible
    assert len(trace) - 1 <= 50
    for a, b in zip(trace, trace[1:]):
        violated = a.F > problem.thresholds
        assert np.all(b.F[violated] < a.F[violated])
        assert np.linalg.norm(b.x - a.x) <= 1.0 + 1e-12


def test_feasible_start_takes_no_steps():
    trace = gi.recover_until_feasible(gi.toy_problem(), (1.0, 1.0), 0.5, 0.1)
    assert len(trace) == 1 and trace[0].feasible


def test_toy_naive_baseline_is_slower():
    problem = gi.toy_problem()
    ours = gi.recover_until_feasible(problem, gi.TOY_START, 0.5, 0.1)
    naive = gi.naive_recovery(problem, gi.TOY_START, 0.5, 0.1)
    assert naive[-1].feasible
    assert len(naive) >= len(ours)


def random_linear_instance(rng):
    """Two random half-planes with an infeasible start that violates both."""
    A = rng.normal(size=(2, 2))
    b = rng.uniform(0.0, 1.0, size=2)
    while True:
        x0 = 4.0 * rng.normal(size=2)
        if np.all(A @ x0 > b):
            return gi.linear_problem(A, b), x0


def test_naive_baseline_needs_at_least_as_many_steps():
    rng = np.random.default_rng(2024)
    wins = 0
    for _ in range(5):
        problem, x0 = random_linear_instance(rng)
        ours = gi.recover_until_feasible(problem, x0, 0.5, 0.1, max_iters=500)
        naive = gi.naive_recovery(problem, x0, 0.5, 0.1, max_iters=500)
        assert ours[-1].feasible
        wins += len(naive) >= len(ours)
    assert wins >= 4


@pytest.mark.parametrize("seed", range(30))
def test_active_set_is_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    G = rng.normal(size=(2, n))
    F = rng.uniform(1.0, 3.0, size=2)
    d = rng.uniform(0.1, 0.5, size=2)
    eps = 0.1  # small region: the truncation binds, which is where invariance holds
    base = RecoveryProblem(G, F, d, 0.05, ident, eps)
    scaled = RecoveryProblem(G * [[10.0], [1.0]], F * [10.0, 1.0], d * [10.0, 1.0], 0.05, ident, eps)

    def active(p):
        g = gi.recovery_direction(p)
        return tuple(np.abs(p.G @ g + p.offsets()) <= 1e-7 * max(1.0, np.max(np.abs(p.offsets()))))
    assert active(base) == active(scaled)


def test_trace_csv(tmp_path):
    trace = gi.recover_until_feasible(gi.toy_problem(), gi.TOY_START, 0.5, 0.1)
    path = tmp_path / "t.csv"
    gi.write_trace_csv(path, trace)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "iter,x1,x2,F_1,F_2,feasible"
    assert len(lines) == len(trace) + 2
    assert lines[-1].endswith(",1")
