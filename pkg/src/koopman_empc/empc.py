"""Economic MPC for the pasteurization unit as a condensed convex QP.

Decision vector (N = horizon)::

    [u_0 .. u_{N-1} (3 each) | eps1 | eps3 | eps1s | eps3s | eps1u]   (8N)

Inputs, slacks and costs are in physical units. The linear prediction model
works in scaled units; the affine descaling is folded into the prediction
matrices. Output constraints and slacks with index k refer to the output
predicted after applying u_k, i.e. y_{k+1}.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, Infeasible, ScalerMissing
from .qp import INF, INFEASIBLE, OPTIMAL, AdmmSolver, QpResult, QpSettings, QuadraticProgram
from .ssmodel import StateSpaceModel

SLACK_NAMES = ("eps1", "eps3", "eps1s", "eps3s", "eps1u")


@dataclass
class EmpcConfig:
    N: int = 60
    timestep: float = 10.0
    c_energy: float = 4.56e-2
    c_material: float = 4.78
    c_input: float = 4.56e-1
    c_soft: float = 5.92e-2
    q_u: float = 4.56
    u1_soft: tuple = (5.8, 7.4)
    u1_hard: tuple = (1.3, 11.9)
    u2_bounds: tuple = (0.8, 11.5)
    u3_bounds: tuple = (0.25, 1.0)
    y_min: tuple = (72.5, 0.0, 73.0)
    y_max: tuple = (100.0, 100.0, 100.0)
    eps_max: float = INF
    eps_soft_max: float = 0.5
    eps_u_max: float = 4.5
    delta_u_units: str = "physical"
    tol: float = 1e-5
    max_iter: int = 20000

    def validate(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.eps_max, self.eps_soft_max, self.eps_u_max) < 0:
            raise ValueError("slack caps must be non-negative")
        lo, hi = self.u1_soft
        hlo, hhi = self.u1_hard
        if not (hlo <= lo <= hi <= hhi):
            raise ValueError("soft u1 range must lie inside the hard range")
        if self.delta_u_units not in ("physical", "scaled"):
            raise ValueError("delta_u_units must be 'physical' or 'scaled'")

    @property
    def u_lower(self):
        return np.array([self.u1_hard[0], self.u2_bounds[0], self.u3_bounds[0]])

    @property
    def u_upper(self):
        return np.array([self.u1_hard[1], self.u2_bounds[1], self.u3_bounds[1]])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class VariableLayout:
    N: int
    m: int = 3

    @property
    def n_vars(self):
        return self.N * (self.m + len(SLACK_NAMES))

    def u(self, k, j):
        return k * self.m + j

    def slack(self, name, k):
        return self.N * self.m + SLACK_NAMES.index(name) * self.N + k

    def split(self, z):
        U = z[:self.N * self.m].reshape(self.N, self.m)
        rest = z[self.N * self.m:].reshape(len(SLACK_NAMES), self.N)
        return U, {name: rest[i] for i, name in enumerate(SLACK_NAMES)}


@dataclass
class EmpcProblem(QuadraticProgram):
    layout: VariableLayout = None
    row_labels: list = field(default_factory=list)
    fault_steps: np.ndarray = None
    y_free: np.ndarray = None     # physical outputs y_1..y_N for u = 0, (N, p)
    y_gain: np.ndarray = None     # d y_flat / d u_flat, (N*p, N*m)
    u_prev: np.ndarray = None
    constant: float = 0.0         # cost offset from u_prev in the movement penalty

    def to_dict(self):
        return {
            "P": self.P.tolist(), "q": self.q.tolist(), "A": self.A.tolist(),
            "l": self.l.tolist(), "u": self.u.tolist(), "rows": self.row_labels,
            "N": self.layout.N, "u_prev": self.u_prev.tolist(),
        }


@dataclass
class EmpcSolution:
    U: np.ndarray
    slacks: dict
    stage_costs: np.ndarray
    status: str
    iterations: int
    kkt: dict
    objective: float
    Y_pred: np.ndarray
    raw: QpResult = None

    @property
    def u0(self):
        return self.U[0].copy()


def prediction_matrices(M: StateSpaceModel, N):
    """Scaled-unit prediction ``y_{k+1} = Psi_k x0 + sum_{i<=k} Theta_{k,i} u_i``."""
    n, m, p = M.n, M.m, M.p
    Psi = np.empty((N * p, n))
    Theta = np.zeros((N * p, N * m))
    markov = np.empty((N, p, m))
    Ak = M.A.copy()
    AkB = M.B.copy()
    for k in range(N):
        Psi[k * p:(k + 1) * p] = M.C @ Ak
        markov[k] = M.C @ AkB
        Ak = M.A @ Ak
        AkB = M.A @ AkB
    for k in range(N):
        for i in range(k + 1):
            Theta[k * p:(k + 1) * p, i * m:(i + 1) * m] = markov[k - i]
    return Psi, Theta


def _fault_mask(N, fault_window):
    mask = np.zeros(N, dtype=bool)
    if fault_window is not None:
        start, end = fault_window
        mask[max(start, 0):max(min(end, N), 0)] = True
    return mask


def build_qp(M: StateSpaceModel, cfg: EmpcConfig, x_hat, d_hat, u_prev, fault_window=None,
             _pred=None) -> EmpcProblem:
    """Assemble the condensed EMPC QP.

    ``fault_window`` is a half-open range of prediction steps during which u1
    is pinned to its hard minimum and its range slack carries no cost.
    """
    cfg.validate()
    if M.u_scaler is None or M.y_scaler is None:
        raise ScalerMissing("EMPC needs a model with input and output scalers")
    x_hat = np.asarray(x_hat, dtype=float)
    d_hat = np.asarray(d_hat, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if x_hat.size != M.n or d_hat.size != M.p or u_prev.size != M.m or M.m != 3 or M.p != 3:
        raise DimensionMismatch("state, disturbance or input dimension does not match the model")
    N, m, p = cfg.N, M.m, M.p
    lay = VariableLayout(N, m)
    nv = lay.n_vars
    nu = N * m
    fault = _fault_mask(N, fault_window)

    Psi, Theta = _pred if _pred is not None else prediction_matrices(M, N)
    su, mu = M.u_scaler.std, M.u_scaler.mean
    sy, my = M.y_scaler.std, M.y_scaler.mean
    # physical y = sy * (Psi x + Theta (u - mu)/su + d) + my
    Sy = np.tile(sy, N)
    Su_inv = np.tile(1.0 / su, N)
    gain = Sy[:, None] * Theta * Su_inv[None, :]
    free_scaled = Psi @ x_hat - Theta @ (np.tile(mu, N) / np.tile(su, N)) + np.tile(d_hat, N)
    y_free = Sy * free_scaled + np.tile(my, N)

    # Objective.
    P = np.zeros((nv, nv))
    q = np.zeros(nv)
    w = np.full(m, cfg.q_u)
    if cfg.delta_u_units == "scaled":
        w = w / su ** 2
    Dm = np.eye(nu) - np.eye(nu, k=-m)
    W = np.tile(w, N)
    P[:nu, :nu] = 2 * Dm.T @ (W[:, None] * Dm)
    q[:m] -= 2 * w * u_prev
    constant = float(np.sum(w * u_prev ** 2))
    for k in range(N):
        q[lay.u(k, 2)] += cfg.c_energy
        q[lay.slack("eps1", k)] += cfg.c_material
        q[lay.slack("eps3", k)] += cfg.c_material
        q[lay.slack("eps1s", k)] += cfg.c_soft
        q[lay.slack("eps3s", k)] += cfg.c_soft
        if not fault[k]:
            q[lay.slack("eps1u", k)] += cfg.c_input

    rows, lo, hi, labels = [], [], [], []

    def add(row, lower, upper, label):
        rows.append(row)
        lo.append(lower)
        hi.append(upper)
        labels.append(label)

    ulo, uhi = cfg.u_lower, cfg.u_upper
    for k in range(N):
        for j in range(m):
            r = np.zeros(nv)
            r[lay.u(k, j)] = 1.0
            if j == 0 and fault[k]:
                add(r, ulo[0], ulo[0], f"u1_pinned[{k}]")
            else:
                add(r, ulo[j], uhi[j], f"u{j + 1}_hard[{k}]")
        r = np.zeros(nv)
        r[lay.u(k, 0)] = 1.0
        r[lay.slack("eps1u", k)] = 1.0
        add(r, cfg.u1_soft[0] if not fault[k] else -INF, INF, f"u1_soft_lo[{k}]")
        r = np.zeros(nv)
        r[lay.u(k, 0)] = 1.0
        r[lay.slack("eps1u", k)] = -1.0
        add(r, -INF, cfg.u1_soft[1] if not fault[k] else INF, f"u1_soft_hi[{k}]")

    for k in range(N):
        for i, (soft, strict) in ((0, ("eps1s", "eps1")), (2, ("eps3s", "eps3"))):
            g = gain[k * p + i]
            c0 = y_free[k * p + i]
            r = np.zeros(nv)
            r[:nu] = g
            r[lay.slack(soft, k)] = 1.0
            r[lay.slack(strict, k)] = 1.0
            add(r, cfg.y_min[i] - c0, INF, f"y{i + 1}_soft[{k}]")
            r = np.zeros(nv)
            r[:nu] = g
            add(r, -INF, cfg.y_max[i] - c0, f"y{i + 1}_max[{k}]")
        r = np.zeros(nv)
        r[:nu] = gain[k * p + 1]
        c0 = y_free[k * p + 1]
        add(r, cfg.y_min[1] - c0, cfg.y_max[1] - c0, f"y2_hard[{k}]")

    caps = {"eps1": cfg.eps_max, "eps3": cfg.eps_max, "eps1s": cfg.eps_soft_max,
            "eps3s": cfg.eps_soft_max, "eps1u": cfg.eps_u_max}
    for name in SLACK_NAMES:
        for k in range(N):
            r = np.zeros(nv)
            r[lay.slack(name, k)] = 1.0
            cap = 0.0 if (name == "eps1u" and fault[k]) else caps[name]
            add(r, 0.0, cap, f"{name}_box[{k}]")

    return EmpcProblem(P=P, q=q, A=np.array(rows), l=np.array(lo), u=np.array(hi),
                       layout=lay, row_labels=labels, fault_steps=fault,
                       y_free=y_free.reshape(N, p), y_gain=gain, u_prev=u_prev, constant=constant)


def predicted_outputs(prob: EmpcProblem, U):
    return (prob.y_free.ravel() + prob.y_gain @ np.asarray(U).ravel()).reshape(prob.layout.N, -1)


def stage_costs(prob: EmpcProblem, cfg: EmpcConfig, U, slacks):
    U = np.asarray(U)
    dU = np.diff(np.vstack([prob.u_prev, U]), axis=0)
    w = np.full(U.shape[1], cfg.q_u)
    if cfg.delta_u_units == "scaled":
        raise NotImplementedError("stage cost breakdown is reported for physical movement weights only")
    eps_u = np.where(prob.fault_steps, 0.0, slacks["eps1u"])
    return (cfg.c_energy * U[:, 2] + cfg.c_material * (slacks["eps1"] + slacks["eps3"])
            + cfg.c_input * eps_u + cfg.c_soft * (slacks["eps1s"] + slacks["eps3s"])
            + np.sum(w * dU ** 2, axis=1))


def slack_order_violation(sol: EmpcSolution, cfg: EmpcConfig, active=None):
    """Largest shortfall of a soft slack below its cap at steps where the
    matching material slack is positive (zero when the fill order holds).

    A slack counts as positive above ``active`` (default: the solver tolerance).
    """
    active = cfg.tol if active is None else active
    worst = 0.0
    for strict, soft in (("eps1", "eps1s"), ("eps3", "eps3s")):
        on = sol.slacks[strict] > active
        if np.any(on):
            worst = max(worst, float(np.max(cfg.eps_soft_max - sol.slacks[soft][on])))
    return worst


def qp_settings(cfg: EmpcConfig) -> QpSettings:
    return QpSettings(eps_abs=cfg.tol, eps_rel=cfg.tol, max_iter=cfg.max_iter)


def solve_empc(prob: EmpcProblem, cfg: EmpcConfig, warm=None, solver: AdmmSolver | None = None) -> EmpcSolution:
    """Solve a built problem. ``solver`` may be reused while P and A stay the same."""
    if solver is None:
        solver = AdmmSolver(prob.P, prob.A, qp_settings(cfg), q_hint=prob.q)
    warm_x, warm_y = warm if warm is not None else (None, None)
    res = solver.solve(prob.q, prob.l, prob.u, warm_x=warm_x, warm_y=warm_y)
    if res.status == INFEASIBLE:
        row = int(np.argmax(np.abs(res.y)))
        raise Infeasible(f"EMPC problem infeasible (row {prob.row_labels[row]})", row=prob.row_labels[row])
    U, slacks = prob.layout.split(res.x)
    costs = stage_costs(prob, cfg, U, slacks) if cfg.delta_u_units == "physical" else np.full(cfg.N, np.nan)
    return EmpcSolution(U=U.copy(), slacks={k: v.copy() for k, v in slacks.items()}, stage_costs=costs,
                        status=res.status, iterations=res.iterations, kkt=res.residuals,
                        objective=res.objective + prob.constant, Y_pred=predicted_outputs(prob, U), raw=res)


def shift_warm_start(prob: EmpcProblem, sol: EmpcSolution):
    """Primal/dual guess for the next step: drop the first move, repeat the last."""
    lay = prob.layout
    U = np.vstack([sol.U[1:], sol.U[-1:]])
    parts = [U.ravel()]
    for name in SLACK_NAMES:
        s = sol.slacks[name]
        parts.append(np.concatenate([s[1:], s[-1:]]))
    x = np.concatenate(parts)
    # Row blocks have a fixed per-step structure, so the duals shift the same way.
    y = sol.raw.y.copy()
    n_in = 5 * lay.N
    n_out = 5 * lay.N
    blocks = [y[:n_in].reshape(lay.N, 5), y[n_in:n_in + n_out].reshape(lay.N, 5)]
    shifted = [np.vstack([b[1:], b[-1:]]).ravel() for b in blocks]
    box = y[n_in + n_out:].reshape(len(SLACK_NAMES), lay.N)
    shifted.append(np.hstack([box[:, 1:], box[:, -1:]]).ravel())
    return x, np.concatenate(shifted)


class EmpcController:
    """Receding-horizon wrapper that keeps prediction matrices and warm starts."""

    def __init__(self, M: StateSpaceModel, cfg: EmpcConfig | None = None):
        self.model = M
        self.cfg = cfg or EmpcConfig()
        self.cfg.validate()
        if not np.isclose(M.timestep, self.cfg.timestep):
            raise DimensionMismatch(f"model timestep {M.timestep} differs from controller timestep {self.cfg.timestep}")
        self._pred = prediction_matrices(M, self.cfg.N)
        self._warm = None
        self._solver = None

    def step(self, x_hat, d_hat, u_prev, fault_window=None):
        prob = build_qp(self.model, self.cfg, x_hat, d_hat, u_prev, fault_window, _pred=self._pred)
        # The constraint matrix and Hessian depend only on the model and weights.
        if self._solver is None:
            self._solver = AdmmSolver(prob.P, prob.A, qp_settings(self.cfg), q_hint=prob.q)
        sol = solve_empc(prob, self.cfg, warm=self._warm, solver=self._solver)
        if sol.status == OPTIMAL:
            self._warm = shift_warm_start(prob, sol)
        else:
            self._warm = None
        return sol.u0, {"problem": prob, "solution": sol}


def empc_step(M: StateSpaceModel, cfg: EmpcConfig, x_hat, d_hat, u_prev, fault_window=None):
    """Build and solve one EMPC problem; returns the first move and diagnostics."""
    prob = build_qp(M, cfg, x_hat, d_hat, u_prev, fault_window)
    sol = solve_empc(prob, cfg)
    return sol.u0, {"problem": prob, "solution": sol}


def dump_problem(prob: EmpcProblem, path):
    Path(path).write_text(json.dumps(prob.to_dict()))
