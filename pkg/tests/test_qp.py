import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_empc.errors import MaxIterations
from koopman_empc.qp import (INF, INFEASIBLE, MAX_ITER, OPTIMAL, AdmmSolver, QpSettings, QuadraticProgram,
                             kkt_residuals, solve_qp)
from qp_oracle import enumerate_active_sets, random_qp


def _qp(P, q, A, l, u):
    return QuadraticProgram(np.atleast_2d(P), np.atleast_1d(q), np.atleast_2d(A), np.atleast_1d(l),
                            np.atleast_1d(u))


def test_clipped_unconstrained_optimum():
    qp = _qp([[2.0]], [-2.0], [[1.0]], [0.0], [0.5])
    res = solve_qp(qp)
    assert res.status == OPTIMAL and res.x[0] == pytest.approx(0.5, abs=1e-8)
    assert max(kkt_residuals(qp, res.x, res.y).values()) < 1e-8


def test_lp_corner():
    qp = _qp([[0.0]], [1.0], [[1.0]], [2.0], [INF])
    res = solve_qp(qp)
    assert res.status == OPTIMAL and res.x[0] == pytest.approx(2.0, abs=1e-8)
    assert max(kkt_residuals(qp, res.x, res.y).values()) < 1e-8


def test_infeasible_detected():
    qp = _qp(np.eye(2), [0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]], [2.0, -INF], [INF, 1.0])
    assert solve_qp(qp).status == INFEASIBLE


def test_max_iter_reported_and_raised():
    rng = np.random.default_rng(0)
    P, q, G, h = random_qp(rng, n_max=10, m_max=10)
    qp = QuadraticProgram(P, q, G, np.full(len(h), -INF), h)
    s = QpSettings(max_iter=1, polish=False, tighten_steps=0, check_interval=1)
    res = solve_qp(qp, s)
    if res.status == MAX_ITER:
        with pytest.raises(MaxIterations) as exc:
            solve_qp(qp, s, raise_on_max_iter=True)
        assert exc.value.solution.status == MAX_ITER


def test_kkt_sensitivity():
    qp = _qp([[2.0]], [-2.0], [[1.0]], [0.0], [0.5])
    res = solve_qp(qp)
    moved = kkt_residuals(qp, res.x + 1e-2, res.y)
    assert moved["stationarity"] > 1e-3


def test_kkt_complementarity_for_suboptimal_point():
    qp = _qp([[2.0]], [-2.0], [[1.0]], [0.0], [0.5])
    # feasible x = 0.2 with the optimal multiplier: the bound is not active
    assert kkt_residuals(qp, np.array([0.2]), np.array([1.0]))["complementarity"] > 0.1


def test_kkt_infinite_bound_multiplier():
    qp = _qp([[1.0]], [0.0], [[1.0]], [-INF], [INF])
    assert kkt_residuals(qp, np.array([0.0]), np.array([-0.5]))["complementarity"] == 0.5


def test_equality_rows():
    # min |x|^2 s.t. x1 + x2 = 1
    qp = _qp(2 * np.eye(2), [0.0, 0.0], [[1.0, 1.0]], [1.0], [1.0])
    res = solve_qp(qp)
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-8)


@pytest.mark.parametrize("seed", range(40))
def test_matches_active_set_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    P, q, G, h = random_qp(rng)
    x_star, obj_star, _ = enumerate_active_sets(P, q, G, h)
    qp = QuadraticProgram(P, q, G, np.full(len(h), -INF), h)
    res = solve_qp(qp)
    assert res.status == OPTIMAL
    assert abs(res.objective - obj_star) <= 1e-6 * max(1.0, abs(obj_star))
    assert np.max(np.abs(res.x - x_star)) <= 1e-4


def test_solver_reuse_across_vectors():
    rng = np.random.default_rng(7)
    P, q, G, h = random_qp(rng, n_max=12, m_max=8)
    solver = AdmmSolver(P, G)
    prev = None
    for shift in (0.0, 0.3, -0.2):
        q2 = q + shift
        x_star, obj_star, _ = enumerate_active_sets(P, q2, G, h)
        res = solver.solve(q2, np.full(len(h), -INF), h, *(prev or (None, None)))
        assert np.max(np.abs(res.x - x_star)) <= 1e-4
        prev = (res.x, res.y)


def test_deterministic():
    rng = np.random.default_rng(8)
    P, q, G, h = random_qp(rng)
    qp = QuadraticProgram(P, q, G, np.full(len(h), -INF), h)
    a, b = solve_qp(qp), solve_qp(qp)
    assert a.x.tobytes() == b.x.tobytes() and a.iterations == b.iterations


def test_cvxopt_cross_check():
    cvxopt = pytest.importorskip("cvxopt")
    cvxopt.solvers.options["show_progress"] = False
    rng = np.random.default_rng(9)
    for _ in range(10):
        P, q, G, h = random_qp(rng, m_max=40)
        ref = cvxopt.solvers.qp(*(cvxopt.matrix(a) for a in (P, q, G, h)))
        x_ref = np.array(ref["x"]).ravel()
        res = solve_qp(QuadraticProgram(P, q, G, np.full(len(h), -INF), h))
        assert np.max(np.abs(res.x - x_ref)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_box_qp_property(seed):
    # Separable box QP: the optimum is the clipped unconstrained minimizer.
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    d = rng.uniform(0.1, 10, n)
    c = rng.normal(size=n) * 5
    lo = rng.uniform(-2, 0, n)
    hi = lo + rng.uniform(0, 3, n)
    res = solve_qp(QuadraticProgram(np.diag(d), -d * c, np.eye(n), lo, hi))
    assert res.status == OPTIMAL
    assert np.allclose(res.x, np.clip(c, lo, hi), atol=1e-6)


def test_rejects_bad_bounds():
    with pytest.raises(ValueError):
        _qp([[1.0]], [0.0], [[1.0]], [1.0], [0.0])
