import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from conftest import random_stable
from koopman_empc.errors import SingularInnovation, Undetectable
from koopman_empc.estimator import (AugmentedKalman, build_augmented, kf_step, riccati_step,
                                    steady_state_covariance, write_trace_csv)
from koopman_empc.ssmodel import StateSpaceModel


def _scalar_filter(P0=1.0, Q=0.1, R=0.5):
    return AugmentedKalman(A=np.eye(1), B=np.zeros((1, 1)), C=np.eye(1), Q=Q * np.eye(1), R=R * np.eye(1),
                           P=P0 * np.eye(1), x=np.zeros(1), n_model=1)


def _model(seed=0, n=3):
    A, B, C = random_stable(n, 3, 3, np.random.default_rng(seed), radius=0.8)
    return StateSpaceModel(A, B, C, 10.0)


def test_augmented_structure():
    kf = build_augmented(_model())
    assert kf.A.shape == (6, 6)
    assert np.array_equal(kf.A[3:, 3:], np.eye(3)) and not np.any(kf.A[3:, :3]) and not np.any(kf.A[:3, 3:])
    assert np.array_equal(kf.C[:, 3:], np.eye(3))


def test_undetectable():
    M = StateSpaceModel(np.eye(3) * 0.5, np.eye(3), np.zeros((3, 3)), 1.0)
    with pytest.raises(Undetectable):
        build_augmented(M)


def test_scalar_gain_by_hand():
    kf = _scalar_filter()
    kf_step(kf, [0.0], [1.0])
    # predicted P = 1.1, gain 1.1 / 1.6
    assert kf.x[0] == pytest.approx(1.1 / 1.6, rel=1e-14)
    assert kf.P[0, 0] == pytest.approx(1.1 - 1.1 ** 2 / 1.6, rel=1e-12)


def test_zero_innovation_leaves_estimate():
    kf = build_augmented(_model(1))
    kf.x = np.random.default_rng(0).normal(size=6)
    u = np.array([0.3, -0.2, 0.1])
    predicted = kf.A @ kf.x + kf.B @ u
    kf_step(kf, u, kf.C @ predicted)
    assert np.allclose(kf.x, predicted, atol=1e-14)


def test_offset_free_bias_estimation():
    M = _model(2)
    rng = np.random.default_rng(3)
    delta = np.array([0.7, -0.4, 1.2])
    kf = build_augmented(M)
    x = rng.normal(size=3)
    for _ in range(200):
        u = rng.normal(size=3)
        x = M.A @ x + M.B @ u
        kf_step(kf, u, M.C @ x + delta)
    x_hat, d_hat = kf.split()
    assert np.all(np.abs(d_hat - delta) <= 1e-3 * np.abs(delta))
    assert np.allclose(M.C @ x_hat + d_hat, M.C @ x + delta, atol=1e-3)


def test_scalar_riccati_fixed_point():
    P = steady_state_covariance(_scalar_filter())[0, 0]
    assert abs(P - ((P + 0.1) - (P + 0.1) ** 2 / (P + 0.6))) < 1e-10


def test_no_process_noise_gives_zero_covariance():
    kf = AugmentedKalman(A=0.5 * np.eye(2), B=np.zeros((2, 1)), C=np.eye(2), Q=np.zeros((2, 2)),
                         R=np.eye(2), P=np.eye(2), x=np.zeros(2), n_model=2)
    assert np.allclose(steady_state_covariance(kf), 0.0, atol=1e-10)


def test_fixed_point_matches_dare_and_running_filter():
    kf = build_augmented(_model(4))
    P_inf = steady_state_covariance(kf)
    Pp = solve_discrete_are(kf.A.T, kf.C.T, kf.Q, kf.R)
    posterior = Pp - Pp @ kf.C.T @ np.linalg.solve(kf.C @ Pp @ kf.C.T + kf.R, kf.C @ Pp)
    assert np.allclose(P_inf, posterior, atol=1e-8)
    rng = np.random.default_rng(5)
    for _ in range(2000):
        kf_step(kf, rng.normal(size=3), rng.normal(size=3))
    assert np.max(np.abs(kf.P - P_inf)) < 1e-6


def test_covariance_stays_psd():
    kf = build_augmented(_model(6))
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        kf_step(kf, rng.normal(size=3), rng.normal(size=3) * 10)
    assert np.array_equal(kf.P, kf.P.T)
    assert np.linalg.eigvalsh(kf.P).min() >= -1e-10


def test_riccati_step_symmetric():
    kf = build_augmented(_model(8))
    P = riccati_step(kf.A, kf.C, kf.Q, kf.R, kf.P)
    assert np.array_equal(P, P.T)


def test_singular_innovation():
    kf = AugmentedKalman(A=np.eye(1), B=np.zeros((1, 1)), C=np.zeros((1, 1)), Q=np.zeros((1, 1)),
                         R=np.zeros((1, 1)), P=np.zeros((1, 1)), x=np.zeros(1), n_model=1)
    with pytest.raises(SingularInnovation):
        kf_step(kf, [0.0], [1.0])


def test_trace_csv(tmp_path):
    kf = build_augmented(_model(9))
    for _ in range(3):
        kf_step(kf, np.zeros(3), np.ones(3))
    write_trace_csv(kf, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,innov1,innov2,innov3,d_hat1,d_hat2,d_hat3" and len(lines) == 4
