"""Nonlinear three-temperature surrogate of the pasteurization unit.

States are the holding-tube outlet (T1), the heating tank (T2) and the
heat-exchanger outlet (T3). Inputs are feed flow u1 [cm^3/s], hot-medium
flow u2 [cm^3/s] and heater power u3 [kW].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import fsolve

from .errors import NonFiniteState

SUBSTEP = 0.1


@dataclass(frozen=True)
class PlantParams:
    T_in: float = 18.0
    T_amb: float = 20.0
    eps_r: float = 0.55
    beta: float = 1.4
    delta: float = 0.1
    V1: float = 70.0
    V3: float = 40.0
    k_amb: float = 0.002
    C2: float = 9.0
    eta: float = 0.95
    c_rho: float = 4.18e-3
    h_loss: float = 0.002

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name in ("T_in", "T_amb"):
                continue
            if not value > 0:
                raise ValueError(f"plant parameter {name} must be positive")
        if not self.eps_r < 1:
            raise ValueError("eps_r must be < 1")
        if not self.eta <= 1:
            raise ValueError("eta must be <= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def heating_effectiveness(u1, u2, p: PlantParams):
    return 1.0 - math.exp(-p.beta * u2 / max(u1, p.delta))


def _deriv(T1, T2, T3, u1, u2, u3, p):
    T_pre = p.T_in + p.eps_r * (T1 - p.T_in)
    eps_h = 1.0 - math.exp(-p.beta * u2 / max(u1, p.delta))
    T_h = T_pre + eps_h * (T2 - T_pre)
    d3 = (T_h - T3) * u1 / p.V3
    d1 = (T3 - T1) * u1 / p.V1 - p.k_amb * (T1 - p.T_amb)
    d2 = (p.eta * u3 - p.c_rho * u1 * (T_h - T_pre) - p.h_loss * (T2 - p.T_amb)) / p.C2
    return d1, d2, d3


def plant_derivative(x, u, p: PlantParams = PlantParams()) -> np.ndarray:
    """Time derivative of (T1, T2, T3) in degC/s."""
    T1, T2, T3 = (float(v) for v in x)
    if not all(math.isfinite(v) for v in (T1, T2, T3)):
        raise NonFiniteState(f"non-finite plant state {x!r}")
    return np.array(_deriv(T1, T2, T3, float(u[0]), float(u[1]), float(u[2]), p))


def _rk4(T1, T2, T3, u1, u2, u3, h, p):
    a1, a2, a3 = _deriv(T1, T2, T3, u1, u2, u3, p)
    b1, b2, b3 = _deriv(T1 + 0.5 * h * a1, T2 + 0.5 * h * a2, T3 + 0.5 * h * a3, u1, u2, u3, p)
    c1, c2, c3 = _deriv(T1 + 0.5 * h * b1, T2 + 0.5 * h * b2, T3 + 0.5 * h * b3, u1, u2, u3, p)
    d1, d2, d3 = _deriv(T1 + h * c1, T2 + h * c2, T3 + h * c3, u1, u2, u3, p)
    s = h / 6.0
    return (
        T1 + s * (a1 + 2 * b1 + 2 * c1 + d1),
        T2 + s * (a2 + 2 * b2 + 2 * c2 + d2),
        T3 + s * (a3 + 2 * b3 + 2 * c3 + d3),
    )


def plant_step(x, u, dt, p: PlantParams = PlantParams()) -> np.ndarray:
    """One classical RK4 step of length ``dt`` (at most 1 s)."""
    if not 0 < dt <= 1.0:
        raise ValueError("plant_step expects 0 < dt <= 1 s")
    T = _rk4(float(x[0]), float(x[1]), float(x[2]), float(u[0]), float(u[1]), float(u[2]), dt, p)
    if not all(math.isfinite(v) for v in T):
        raise NonFiniteState(f"plant state became non-finite from {x!r}")
    return np.array(T)


def advance(x, u, duration, p: PlantParams = PlantParams(), substep=SUBSTEP) -> np.ndarray:
    """Hold ``u`` for ``duration`` seconds using fixed RK4 substeps."""
    n = max(1, int(round(duration / substep)))
    h = duration / n
    T1, T2, T3 = (float(v) for v in x)
    u1, u2, u3 = (float(v) for v in u)
    for _ in range(n):
        T1, T2, T3 = _rk4(T1, T2, T3, u1, u2, u3, h, p)
    if not all(math.isfinite(v) for v in (T1, T2, T3)):
        raise NonFiniteState("plant state became non-finite")
    return np.array([T1, T2, T3])


def simulate_plant(x0, U, dt, p: PlantParams = PlantParams()) -> np.ndarray:
    """Sampled outputs of the plant under zero-order-hold inputs.

    ``Y[k]`` is the measurement taken at ``k * dt``, just before ``U[k]`` is
    applied, so ``Y[0] == x0``.
    """
    U = np.asarray(U, dtype=float).reshape(-1, 3)
    Y = np.empty((U.shape[0], 3))
    x = np.asarray(x0, dtype=float)
    for k in range(U.shape[0]):
        Y[k] = x
        x = advance(x, U[k], dt, p)
    return Y


def steady_state(u, p: PlantParams = PlantParams(), guess=(70.0, 80.0, 70.0)) -> np.ndarray:
    """Equilibrium temperatures for constant input ``u`` via root finding."""
    sol, info, ier, msg = fsolve(lambda x: plant_derivative(x, u, p), np.asarray(guess, float),
                                 full_output=True, xtol=1e-12)
    if np.linalg.norm(plant_derivative(sol, u, p)) > 1e-10:
        raise NonFiniteState(f"steady-state solve failed: {msg}")
    return sol
