"""Discrete LTI models: simulation, ZOH timestep rescaling, rank tests, MAE."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch
from .signals import Dataset, Scaler, inverse_transform, transform

DEFAULT_RANK_TOL = 1e-6
X0_LS_SAMPLES = 10


@dataclass(frozen=True)
class StateSpaceModel:
    """x[k+1] = A x[k] + B u[k], y[k] = C x[k], in scaled signal units."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    timestep: float
    u_scaler: Scaler | None = None
    y_scaler: Scaler | None = None
    kind: str = "subspace"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise DimensionMismatch(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
        if not self.timestep > 0:
            raise ValueError("timestep must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A)))) if self.n else 0.0

    def to_dict(self):
        return {
            "kind": self.kind,
            "ts": self.timestep,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "u_scaler": self.u_scaler.to_dict() if self.u_scaler else None,
            "y_scaler": self.y_scaler.to_dict() if self.y_scaler else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            A=np.array(d["A"], dtype=float),
            B=np.array(d["B"], dtype=float),
            C=np.array(d["C"], dtype=float),
            timestep=float(d["ts"]),
            u_scaler=Scaler.from_dict(d["u_scaler"]) if d.get("u_scaler") else None,
            y_scaler=Scaler.from_dict(d["y_scaler"]) if d.get("y_scaler") else None,
            kind=d.get("kind", "subspace"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def lti_step(M: StateSpaceModel, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != M.n or u.shape[-1] != M.m:
        raise DimensionMismatch(f"state {x.shape} / input {u.shape} do not fit model n={M.n}, m={M.m}")
    return M.A @ x + M.B @ u


def lti_output(M: StateSpaceModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != M.n:
        raise DimensionMismatch(f"state of length {x.shape[-1]} for model n={M.n}")
    return M.C @ x


def simulate(M: StateSpaceModel, x0, U):
    """Free-run outputs ``Y[k] = C x[k]`` for ``k = 0..len(U)-1``."""
    U = np.asarray(U, dtype=float).reshape(-1, M.m)
    x = np.asarray(x0, dtype=float)
    X = np.empty((U.shape[0], M.n))
    for k in range(U.shape[0]):
        X[k] = x
        x = M.A @ x + M.B @ U[k]
    return X @ M.C.T


def matrix_power(A, k):
    """A**k by repeated squaring."""
    result = np.eye(A.shape[0])
    base = np.array(A, dtype=float)
    while k > 0:
        if k & 1:
            result = result @ base
        base = base @ base
        k >>= 1
    return result


def rescale_timestep(M: StateSpaceModel, k: int) -> StateSpaceModel:
    """Exact zero-order-hold conversion of the model to a k-times longer period."""
    if k < 1 or int(k) != k:
        raise ValueError("rescale factor must be a positive integer")
    k = int(k)
    if k == 1:
        return M
    Ak = matrix_power(M.A, k)
    # Geometric sum I + A + ... + A^(k-1), built by doubling alongside the power.
    S = _power_sum(M.A, k)
    return replace(M, A=Ak, B=S @ M.B, timestep=k * M.timestep)


def _power_sum(A, k):
    n = A.shape[0]
    if k == 0:
        return np.zeros((n, n))
    if k == 1:
        return np.eye(n)
    half = _power_sum(A, k // 2)
    Ah = matrix_power(A, k // 2)
    S = half + Ah @ half
    if k % 2:
        S = S + matrix_power(A, k - 1)
    return S


def _numerical_rank(M, tol):
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def controllability_matrix(A, B):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(A, B, tol=DEFAULT_RANK_TOL) -> int:
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    return _numerical_rank(controllability_matrix(A, B), tol)


def observability_rank(A, C, tol=DEFAULT_RANK_TOL) -> int:
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    return _numerical_rank(controllability_matrix(np.atleast_2d(A).T, np.atleast_2d(C).T), tol)


def least_squares_x0(M: StateSpaceModel, U, Y, samples=X0_LS_SAMPLES):
    """Initial state minimizing the output error over the first samples."""
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    samples = min(samples, len(Y))
    forced = simulate(M, np.zeros(M.n), U[:samples])
    O = np.empty((samples * M.p, M.n))
    Ak = np.eye(M.n)
    for k in range(samples):
        O[k * M.p:(k + 1) * M.p] = M.C @ Ak
        Ak = M.A @ Ak
    rhs = (Y[:samples] - forced).ravel()
    x0, *_ = np.linalg.lstsq(O, rhs, rcond=None)
    return x0


def open_loop_mae(M: StateSpaceModel, d: Dataset, x0_policy="least_squares"):
    """Per-output mean absolute free-run error on a physical-unit dataset [degC].

    ``x0_policy`` is ``"least_squares"``, ``"zero"`` or a callable
    ``(model, scaled_dataset) -> x0``.
    """
    if M.u_scaler is None or M.y_scaler is None:
        from .errors import ScalerMissing

        raise ScalerMissing("open-loop MAE needs a model with attached scalers")
    if not np.isclose(d.timestep, M.timestep):
        raise DimensionMismatch(f"dataset timestep {d.timestep} differs from model timestep {M.timestep}")
    Us = transform(M.u_scaler, d.U)
    Ys = transform(M.y_scaler, d.Y)
    if callable(x0_policy):
        x0 = x0_policy(M, Dataset(d.timestep, Us, Ys))
    elif x0_policy == "least_squares":
        x0 = least_squares_x0(M, Us, Ys)
    elif x0_policy == "zero":
        x0 = np.zeros(M.n)
    else:
        raise ValueError(f"unknown x0 policy {x0_policy!r}")
    Yhat = inverse_transform(M.y_scaler, simulate(M, x0, Us))
    return np.mean(np.abs(Yhat - d.Y), axis=0)
