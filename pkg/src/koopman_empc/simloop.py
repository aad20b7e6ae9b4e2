"""Closed-loop simulation: plant, offset-free Kalman filter and EMPC."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .empc import EmpcConfig, EmpcController, slack_order_violation
from .errors import KoopmanEmpcError, PlantDiverged, ScenarioMismatch, SolverFailure
from .estimator import build_augmented, kf_step
from .plant import PlantParams, advance
from .signals import inverse_transform, transform
from .ssmodel import StateSpaceModel

LEDGER_FIELDS = ("energy", "material_T1", "material_T3", "input_slack", "soft_T1", "soft_T3",
                 "input_movement")
LEDGER_LABELS = {
    "energy": "Energy cost (u3)",
    "material_T1": "Material loss (T1)",
    "material_T3": "Material loss (T3)",
    "input_slack": "Soft constraint (u1)",
    "soft_T1": "Soft constraint (T1)",
    "soft_T3": "Soft constraint (T3)",
    "input_movement": "Input movement (du)",
}
TRAJECTORY_COLUMNS = ("t", "u1_cmd", "u1_app", "u2", "u3", "y1", "y2", "y3",
                      "eps1", "eps3", "eps1s", "eps3s", "eps1u", "status")


@dataclass
class FaultSpec:
    start: int = 720
    end: int = 780
    channel: int = 0
    mode: str = "pin-to-hard-min"


@dataclass
class ScenarioConfig:
    total_steps: int = 1440
    timestep: float = 10.0
    cold_start: tuple = (65.0, 80.0, 66.0)   # (T1, T2, T3)
    u_prev_init: tuple | None = None          # defaults to midpoint of hard bounds
    fault: FaultSpec | None = field(default_factory=FaultSpec)
    name: str = "cold_batch_pump_fail"

    def validate(self):
        if self.fault is not None and not (0 <= self.fault.start < self.fault.end <= self.total_steps):
            raise ValueError("fault window must satisfy 0 <= start < end <= total_steps")
        if self.fault is not None and (self.fault.channel != 0 or self.fault.mode != "pin-to-hard-min"):
            raise ValueError("only the u1 pin-to-hard-min fault is modelled")

    def in_fault(self, k):
        return self.fault is not None and self.fault.start <= k < self.fault.end

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("fault") is not None:
            d["fault"] = FaultSpec(**d["fault"])
        for key in ("cold_start", "u_prev_init"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class CostLedger:
    energy: float = 0.0
    material_T1: float = 0.0
    material_T3: float = 0.0
    input_slack: float = 0.0
    soft_T1: float = 0.0
    soft_T3: float = 0.0
    input_movement: float = 0.0
    scenario: str = ""

    @property
    def total(self):
        return math.fsum(getattr(self, f) for f in LEDGER_FIELDS)

    def __iadd__(self, other):
        for f in LEDGER_FIELDS:
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self

    def components(self):
        return {f: getattr(self, f) for f in LEDGER_FIELDS}

    def to_dict(self):
        return {**self.components(), "total": self.total, "scenario": self.scenario}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f: float(d[f]) for f in LEDGER_FIELDS}, scenario=d.get("scenario", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def realized_slacks(y, u, cfg: EmpcConfig, in_fault=False):
    """Smallest slack values consistent with measured outputs and applied inputs."""
    out = {}
    for i, tag in ((0, "1"), (2, "3")):
        gap = max(cfg.y_min[i] - y[i], 0.0)
        out["eps" + tag + "s"] = min(gap, cfg.eps_soft_max)
        out["eps" + tag] = max(gap - cfg.eps_soft_max, 0.0)
    if in_fault:
        out["eps1u"] = 0.0
    else:
        out["eps1u"] = max(cfg.u1_soft[0] - u[0], u[0] - cfg.u1_soft[1], 0.0)
    return out


def realized_stage_cost(y, u, du, cfg: EmpcConfig, in_fault=False) -> CostLedger:
    s = realized_slacks(y, u, cfg, in_fault)
    du = np.asarray(du, dtype=float)
    return CostLedger(
        energy=cfg.c_energy * float(u[2]),
        material_T1=cfg.c_material * s["eps1"],
        material_T3=cfg.c_material * s["eps3"],
        input_slack=cfg.c_input * s["eps1u"],
        soft_T1=cfg.c_soft * s["eps1s"],
        soft_T3=cfg.c_soft * s["eps3s"],
        input_movement=float(cfg.q_u * du @ du),
    )


@dataclass
class StepRecord:
    t: float
    u_cmd: np.ndarray
    u_app: np.ndarray
    y: np.ndarray
    x_hat: np.ndarray
    d_hat: np.ndarray
    slacks: dict
    status: str
    iterations: int
    kkt: dict
    predicted_cost: float
    order_violation: float = 0.0


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def array(self, attr):
        return np.array([getattr(r, attr) for r in self.records])

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for r in self.records:
                s = r.slacks
                w.writerow([repr(float(r.t)), repr(float(r.u_cmd[0])), repr(float(r.u_app[0])),
                            repr(float(r.u_app[1])), repr(float(r.u_app[2])),
                            *(repr(float(v)) for v in r.y),
                            *(repr(float(s[k])) for k in ("eps1", "eps3", "eps1s", "eps3s", "eps1u")),
                            r.status])

    def write_diagnostics_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "status", "iters", "kkt_stat", "kkt_primal", "kkt_comp", "J_pred",
                        "slack_order_gap"])
            for k, r in enumerate(self.records):
                w.writerow([k, r.status, r.iterations, repr(r.kkt["stationarity"]),
                            repr(r.kkt["primal"]), repr(r.kkt["complementarity"]),
                            repr(float(r.predicted_cost)), repr(r.order_violation)])


class SurrogatePlant:
    def __init__(self, x0, params: PlantParams | None = None):
        self.params = params or PlantParams()
        self.x = np.asarray(x0, dtype=float)

    def measure(self):
        return self.x.copy()

    def advance(self, u, duration):
        self.x = advance(self.x, u, duration, self.params)
        if np.any(self.x > 1e3) or np.any(self.x < -273.15):
            raise PlantDiverged(f"plant temperatures left the physical range: {self.x}")


class KoopmanPlant:
    """Nonlinear-projection Koopman model used as a simulation plant."""

    def __init__(self, model, y0):
        from .koopman import lift

        self.model = model
        self.x = lift(model, transform(model.y_scaler, y0))

    def measure(self):
        y = self.model.project(self.x[None, :])[0]
        return inverse_transform(self.model.y_scaler, y)

    def advance(self, u, duration):
        steps = int(round(duration / self.model.timestep))
        us = transform(self.model.u_scaler, u)
        for _ in range(steps):
            self.x = self.model.A @ self.x + self.model.B @ us
        if not np.all(np.isfinite(self.x)):
            raise PlantDiverged("Koopman plant state became non-finite")


def make_plant(backend, scenario: ScenarioConfig, plant_params=None, koopman_plant_model=None):
    if backend == "surrogate_ode":
        return SurrogatePlant(scenario.cold_start, plant_params)
    if backend == "koopman_nonlinear":
        if koopman_plant_model is None:
            raise ValueError("koopman_nonlinear backend needs a nonlinear Koopman model")
        return KoopmanPlant(koopman_plant_model, np.asarray(scenario.cold_start, dtype=float))
    raise ValueError(f"unknown plant backend {backend!r}")


def run_closed_loop(controller_model: StateSpaceModel, cfg: EmpcConfig | None = None,
                    scenario: ScenarioConfig | None = None, plant_backend="surrogate_ode",
                    plant_params=None, koopman_plant_model=None, seed=0, progress=None):
    """Simulate the full scenario and return the trajectory and cost ledger.

    The loop is deterministic; ``seed`` is accepted for interface symmetry and
    recorded nowhere because no random quantity enters the simulation.
    """
    cfg = cfg or EmpcConfig()
    scenario = scenario or ScenarioConfig()
    scenario.validate()
    plant = make_plant(plant_backend, scenario, plant_params, koopman_plant_model)
    ctrl = EmpcController(controller_model, cfg)
    kf = build_augmented(controller_model)
    u_lo, u_hi = cfg.u_lower, cfg.u_upper
    if scenario.u_prev_init is None:
        u_prev = 0.5 * (u_lo + u_hi)
    else:
        u_prev = np.asarray(scenario.u_prev_init, dtype=float)
    u_prev_scaled = transform(controller_model.u_scaler, u_prev)
    fault = scenario.fault

    ledger = CostLedger(scenario=scenario.name)
    traj = Trajectory()
    for k in range(scenario.total_steps):
        y = plant.measure()
        y_s = transform(controller_model.y_scaler, y)
        x_hat, d_hat = kf_step(kf, u_prev_scaled, y_s)
        window = None
        if fault is not None and k < fault.end:
            window = (fault.start - k, fault.end - k)
        try:
            u_cmd, diag = ctrl.step(x_hat, d_hat, u_prev, window)
        except KoopmanEmpcError as exc:
            raise SolverFailure(k, exc) from exc
        sol = diag["solution"]
        u_cmd = np.clip(u_cmd, u_lo, u_hi)
        u_app = u_cmd.copy()
        in_fault = scenario.in_fault(k)
        if in_fault:
            u_app[fault.channel] = u_lo[fault.channel]
        ledger += realized_stage_cost(y, u_app, u_app - u_prev, cfg, in_fault)
        traj.records.append(StepRecord(
            t=k * scenario.timestep, u_cmd=u_cmd, u_app=u_app, y=y, x_hat=x_hat, d_hat=d_hat,
            slacks=realized_slacks(y, u_app, cfg, in_fault), status=sol.status,
            iterations=sol.iterations, kkt=sol.kkt, predicted_cost=float(sol.objective),
            order_violation=slack_order_violation(sol, cfg)))
        plant.advance(u_app, scenario.timestep)
        u_prev = u_app
        u_prev_scaled = transform(controller_model.u_scaler, u_prev)
        if progress is not None:
            progress(k)
    return traj, ledger


def improvement_factor(a, b):
    if b == 0.0:
        return 1.0 if a == 0.0 else math.inf
    return a / b


def compare_report(baseline: CostLedger, koopman: CostLedger):
    """Component-wise baseline/koopman ratios plus totals."""
    if baseline.scenario != koopman.scenario:
        raise ScenarioMismatch(f"ledgers come from different scenarios: {baseline.scenario!r} vs {koopman.scenario!r}")
    rows = []
    for f in LEDGER_FIELDS:
        a, b = getattr(baseline, f), getattr(koopman, f)
        rows.append((f, a, b, improvement_factor(a, b)))
    rows.append(("total", baseline.total, koopman.total, improvement_factor(baseline.total, koopman.total)))
    return rows


def _fmt_factor(x):
    return "∞" if math.isinf(x) else f"{x:.2f}"


def format_report(rows, names=("Baseline", "Koopman")):
    label = dict(LEDGER_LABELS, total="Total cost")
    lines = [f"{'Cost component':<24}{names[0]:>12}{names[1]:>12}{'Factor':>10}"]
    lines.append("-" * len(lines[0]))
    for f, a, b, r in rows:
        if f == "total":
            lines.append("-" * len(lines[0]))
        lines.append(f"{label[f]:<24}{a:>12.3f}{b:>12.3f}{_fmt_factor(r):>10}")
    return "\n".join(lines)


def write_report_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "baseline", "koopman", "factor"])
        for f, a, b, r in rows:
            w.writerow([f, repr(a), repr(b), "inf" if math.isinf(r) else repr(r)])
