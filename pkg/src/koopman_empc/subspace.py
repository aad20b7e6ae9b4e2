"""Baseline linear identification: FIR Markov parameters + Ho-Kalman realization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IllConditioned, RankDeficient
from .signals import Dataset, Scaler, fit_scaler, transform
from .ssmodel import StateSpaceModel, simulate

RIDGE_REL = 1e-6
MAX_GRAM_COND = 1e12
RANK_FLOOR = 1e-10
DEFAULT_HORIZON = 40
REFINE_SWEEPS = 2


@dataclass(frozen=True)
class MarkovSequence:
    H: np.ndarray  # (horizon, p, m); H[i-1] multiplies u[k-i]
    offset: np.ndarray | None = None  # (p,) constant output term, when fitted

    @property
    def horizon(self):
        return self.H.shape[0]


def _fir_regressors(U, horizon):
    T, m = U.shape
    rows = T - horizon
    Phi = np.empty((rows, horizon * m))
    for i in range(1, horizon + 1):
        Phi[:, (i - 1) * m:i * m] = U[horizon - i:T - i]
    return Phi


def estimate_markov_parameters(d: Dataset, horizon=DEFAULT_HORIZON, intercept=False) -> MarkovSequence:
    """Least-squares FIR fit ``y[k] = sum_i H_i u[k-i] (+ c)`` on a scaled dataset.

    The normal equations carry a small ridge term; two sweeps of iterated
    Tikhonov refinement then remove the ridge bias on well-excited directions.
    With ``intercept`` a constant output term ``c`` is fitted alongside.
    """
    U, Y = d.U, d.Y
    m, p = U.shape[1], Y.shape[1]
    if len(d) < 10 * horizon * m:
        raise ValueError(f"need at least {10 * horizon * m} samples for horizon {horizon}")
    Phi = _fir_regressors(U, horizon)
    if intercept:
        Phi = np.hstack([Phi, np.ones((len(Phi), 1))])
    target = Y[horizon:]
    G = Phi.T @ Phi
    lam = RIDGE_REL * np.trace(G) / G.shape[0]
    Greg = G + lam * np.eye(G.shape[0])
    cond = np.linalg.cond(Greg)
    if not np.isfinite(cond) or cond > MAX_GRAM_COND:
        raise IllConditioned(f"regressor Gram matrix condition {cond:.3g}")
    rhs = Phi.T @ target
    L = np.linalg.cholesky(Greg)

    def solve(b):
        return np.linalg.solve(L.T, np.linalg.solve(L, b))

    theta = solve(rhs)
    for _ in range(REFINE_SWEEPS):
        theta = theta + solve(rhs - G @ theta)
    offset = theta[-1].copy() if intercept else None
    H = theta[:horizon * m].T.reshape(p, horizon, m).transpose(1, 0, 2)
    return MarkovSequence(H, offset)


def markov_from_model(A, B, C, horizon):
    H = np.empty((horizon, C.shape[0], B.shape[1]))
    AkB = np.array(B, dtype=float)
    for i in range(horizon):
        H[i] = C @ AkB
        AkB = A @ AkB
    return H


def _hankel(H, rows, cols, shift):
    p, m = H.shape[1:]
    out = np.empty((rows * p, cols * m))
    for i in range(rows):
        for j in range(cols):
            out[i * p:(i + 1) * p, j * m:(j + 1) * m] = H[i + j + shift]
    return out


def ho_kalman(H: MarkovSequence, order: int, timestep=1.0) -> StateSpaceModel:
    """Balanced realization of order ``order`` from a Markov sequence."""
    if order < 1:
        raise ValueError("order must be >= 1")
    h = H.horizon
    if h < 2 * order + 1:
        raise ValueError(f"horizon {h} too short for order {order}")
    rows = cols = h // 2
    if rows + cols > h:
        cols -= 1
    p, m = H.H.shape[1:]
    H0 = _hankel(H.H, rows, cols, 0)
    H1 = _hankel(H.H, rows, cols, 1)
    Uu, s, Vt = np.linalg.svd(H0, full_matrices=False)
    if s[0] == 0.0 or order > s.size or s[order - 1] / s[0] < RANK_FLOOR:
        raise RankDeficient(f"Hankel matrix has numerical rank below {order}")
    sq = np.sqrt(s[:order])
    Un = Uu[:, :order]
    Vn = Vt[:order].T
    obs = Un * sq
    ctr = (Vn * sq).T
    A = (Un.T @ H1 @ Vn) / np.outer(sq, sq)
    return StateSpaceModel(A=A, B=ctr[:, :m], C=obs[:p], timestep=timestep)


def refine_input_matrix(M: StateSpaceModel, U, Y, offset=False):
    """Least-squares re-fit of B and x0 with A, C held fixed.

    With ``offset`` a constant output term is fitted too and returned third.
    """
    n, m = M.n, M.m
    cols = []
    for i in range(n):
        x0 = np.zeros(n)
        x0[i] = 1.0
        zero_B = StateSpaceModel(M.A, np.zeros((n, m)), M.C, M.timestep)
        cols.append(simulate(zero_B, x0, U).ravel())
    for i in range(n):
        for j in range(m):
            Bij = np.zeros((n, m))
            Bij[i, j] = 1.0
            cols.append(simulate(StateSpaceModel(M.A, Bij, M.C, M.timestep), np.zeros(n), U).ravel())
    p = M.p
    if offset:
        for i in range(p):
            e = np.zeros((len(U), p))
            e[:, i] = 1.0
            cols.append(e.ravel())
    R = np.column_stack(cols)
    theta, *_ = np.linalg.lstsq(R, np.asarray(Y).ravel(), rcond=None)
    x0 = theta[:n]
    B = theta[n:n + n * m].reshape(n, m)
    if offset:
        return B, x0, theta[n + n * m:]
    return B, x0


def identify_subspace(d: Dataset, order=3, horizon=DEFAULT_HORIZON,
                      u_scaler: Scaler | None = None, y_scaler: Scaler | None = None,
                      refine=True) -> StateSpaceModel:
    """Identify an order-``order`` LTI model from a physical-unit dataset.

    Scalers default to statistics of ``d`` itself. The returned model works in
    scaled units and carries the scalers for later descaling. A constant
    output offset is fitted with the dynamics and folded into the output
    scaler's mean, so data that is linear in physical units (or affine around
    an operating point) is reproduced without a bias from mean-centering.
    """
    u_scaler = u_scaler or fit_scaler(d.U)
    y_scaler = y_scaler or fit_scaler(d.Y)
    Us = transform(u_scaler, d.U)
    Ys = transform(y_scaler, d.Y)
    markov = estimate_markov_parameters(Dataset(d.timestep, Us, Ys), horizon, intercept=True)
    M = ho_kalman(markov, order, timestep=d.timestep)
    B, offset = M.B, markov.offset
    if refine:
        B, _, offset = refine_input_matrix(M, Us, Ys, offset=True)
    y_scaler = Scaler(y_scaler.mean + offset * y_scaler.std, y_scaler.std)
    return StateSpaceModel(A=M.A, B=B, C=M.C, timestep=d.timestep,
                           u_scaler=u_scaler, y_scaler=y_scaler, kind="subspace")
