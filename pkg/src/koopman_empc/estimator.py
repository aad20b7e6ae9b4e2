"""Kalman filter on the model state augmented with constant output disturbances."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoConvergence, SingularInnovation, Undetectable
from .ssmodel import DEFAULT_RANK_TOL, StateSpaceModel, observability_rank

Q_SCALE = 0.1
R_SCALE = 0.5
MAX_INNOVATION_COND = 1e14


@dataclass
class AugmentedKalman:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    x: np.ndarray
    n_model: int
    trace: list = field(default_factory=list)

    @property
    def n_dist(self):
        return self.A.shape[0] - self.n_model

    def split(self):
        return self.x[:self.n_model].copy(), self.x[self.n_model:].copy()

    def predicted_output(self):
        return self.C @ self.x


def build_augmented(M: StateSpaceModel, q_scale=Q_SCALE, r_scale=R_SCALE, x0=None,
                    rank_tol=DEFAULT_RANK_TOL) -> AugmentedKalman:
    n, m, p = M.n, M.m, M.p
    A = np.block([[M.A, np.zeros((n, p))], [np.zeros((p, n)), np.eye(p)]])
    B = np.vstack([M.B, np.zeros((p, m))])
    C = np.hstack([M.C, np.eye(p)])
    if observability_rank(A, C, rank_tol) < n + p:
        raise Undetectable("augmented (A, C) pair is not observable; disturbances cannot be estimated")
    x = np.zeros(n + p)
    if x0 is not None:
        x[:n] = x0
    return AugmentedKalman(A=A, B=B, C=C, Q=q_scale * np.eye(n + p), R=r_scale * np.eye(p),
                           P=np.eye(n + p), x=x, n_model=n)


def kf_step(kf: AugmentedKalman, u_prev, y_meas):
    """Predict with the previous input, correct with the new measurement.

    Returns the model-state and disturbance estimates. The covariance update
    uses the Joseph form.
    """
    kf.x = kf.A @ kf.x + kf.B @ np.asarray(u_prev, dtype=float)
    P = kf.A @ kf.P @ kf.A.T + kf.Q
    S = kf.C @ P @ kf.C.T + kf.R
    if np.linalg.cond(S) > MAX_INNOVATION_COND:
        raise SingularInnovation("innovation covariance is numerically singular")
    K = np.linalg.solve(S, kf.C @ P).T
    innov = np.asarray(y_meas, dtype=float) - kf.C @ kf.x
    kf.x = kf.x + K @ innov
    IKC = np.eye(P.shape[0]) - K @ kf.C
    P = IKC @ P @ IKC.T + K @ kf.R @ K.T
    kf.P = 0.5 * (P + P.T)
    kf.trace.append((innov, kf.x[kf.n_model:].copy()))
    return kf.split()


def riccati_step(A, C, Q, R, P):
    Pp = A @ P @ A.T + Q
    S = C @ Pp @ C.T + R
    K = np.linalg.solve(S, C @ Pp).T
    IKC = np.eye(P.shape[0]) - K @ C
    P = IKC @ Pp @ IKC.T + K @ R @ K.T
    return 0.5 * (P + P.T)


def steady_state_covariance(kf: AugmentedKalman, tol=1e-12, max_iter=100_000):
    """Fixed point of the filter's (posterior) covariance recursion."""
    P = kf.P.copy()
    for _ in range(max_iter):
        P_next = riccati_step(kf.A, kf.C, kf.Q, kf.R, P)
        if np.linalg.norm(P_next - P) < tol:
            return P_next
        P = P_next
    raise NoConvergence(f"Riccati recursion did not converge in {max_iter} iterations")


def write_trace_csv(kf: AugmentedKalman, path):
    p = kf.n_dist
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *[f"innov{i + 1}" for i in range(p)], *[f"d_hat{i + 1}" for i in range(p)]])
        for k, (innov, d) in enumerate(kf.trace):
            w.writerow([k, *map(repr, map(float, innov)), *map(repr, map(float, d))])
