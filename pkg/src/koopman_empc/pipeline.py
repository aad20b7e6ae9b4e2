"""End-to-end pipeline steps shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .empc import EmpcConfig
from .errors import ConfigError
from .koopman import (LINEAR, NONLINEAR, KoopmanModel, TrainConfig, export_linear, koopman_open_loop_mae,
                      reduce_lifted_dimension, train_koopman, write_training_log)
from .plant import PlantParams, simulate_plant, steady_state
from .plots import write_trajectory_plots
from .signals import Dataset, ExcitationSpec, fit_scaler, generate_excitation, read_dataset_csv, write_dataset_csv
from .simloop import CostLedger, ScenarioConfig, compare_report, format_report, run_closed_loop, write_report_csv
from .ssmodel import StateSpaceModel, controllability_rank, observability_rank, open_loop_mae, rescale_timestep
from .subspace import identify_subspace

log = logging.getLogger(__name__)

MODEL_FILES = {
    "subspace": "subspace.json",
    "koopman_linear": "koopman_linear.json",
    "koopman_nonlinear": "koopman_nonlinear.json",
}
CONTROLLERS = {"subspace": "subspace", "koopman": "koopman_linear"}
PLANTS = {"surrogate": "surrogate_ode", "koopman": "koopman_nonlinear"}


def _default_train():
    # Long rollouts (400 s) so the model is trained for the 600 s MPC horizon;
    # strided windows keep the epoch cost down.
    return TrainConfig(rollout_len=400, epochs=150, batch=32, window_stride=10, val_fraction=0.0)


@dataclass
class IdentifyConfig:
    subspace_order: int = 3
    subspace_horizon: int = 40
    lift_start: int = 30
    nonlinear_lift: int = 30
    rank_tol: float = 1e-6
    warm_start: bool = True
    refine_epochs: int = 30
    refine_lr: float = 2e-4
    train: TrainConfig = field(default_factory=_default_train)

    def validate(self):
        if self.subspace_order < 1 or self.subspace_horizon < 2 * self.subspace_order:
            raise ConfigError("identify: need subspace_order >= 1 and subspace_horizon >= 2*order")
        if self.lift_start < 3 or self.nonlinear_lift < 1:
            raise ConfigError("identify: lifted dimensions too small")
        if self.refine_epochs < 1 or not self.refine_lr > 0:
            raise ConfigError("identify: refine_epochs and refine_lr must be positive")
        self.train.validate()


@dataclass
class Paths:
    data_dir: str = "data"
    model_dir: str = "models"
    out_dir: str = "results"


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    plant: PlantParams = field(default_factory=PlantParams)
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    identify: IdentifyConfig = field(default_factory=IdentifyConfig)
    empc: EmpcConfig = field(default_factory=EmpcConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    @property
    def data_seeds(self):
        return self.seed + 1, self.seed + 2

    def validate(self):
        self.excitation.validate()
        self.identify.validate()
        self.empc.validate()
        self.scenario.validate()
        if self.scenario.timestep != self.empc.timestep:
            raise ConfigError("scenario.timestep must equal empc.timestep")
        ratio = self.empc.timestep / 1.0
        if ratio != int(ratio):
            raise ConfigError("control timestep must be a whole number of seconds")

    def to_dict(self):
        return {
            "paths": asdict(self.paths),
            "seed": self.seed,
            "plant": self.plant.to_dict(),
            "excitation": {k: v for k, v in asdict(self.excitation).items() if k != "seed"},
            "identify": {**{f.name: getattr(self.identify, f.name) for f in fields(IdentifyConfig)
                            if f.name != "train"}, "train": self.identify.train.to_dict()},
            "empc": self.empc.to_dict(),
            "scenario": self.scenario.to_dict(),
        }


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _names(cls):
    return [f.name for f in fields(cls)]


def config_from_dict(d: dict) -> RunConfig:
    """Build and validate a RunConfig; every section is optional."""
    _check_keys("config", d, _names(RunConfig))
    cfg = RunConfig()
    try:
        if "paths" in d:
            _check_keys("paths", d["paths"], _names(Paths))
            cfg.paths = Paths(**d["paths"])
        if "seed" in d:
            if not isinstance(d["seed"], int):
                raise ConfigError("seed must be an integer")
            cfg.seed = d["seed"]
        if "plant" in d:
            _check_keys("plant", d["plant"], _names(PlantParams))
            cfg.plant = PlantParams.from_dict({**cfg.plant.to_dict(), **d["plant"]})
        if "excitation" in d:
            _check_keys("excitation", d["excitation"], [n for n in _names(ExcitationSpec) if n != "seed"])
            ex = dict(d["excitation"])
            if "dwell_range" in ex:
                ex["dwell_range"] = tuple(ex["dwell_range"])
            if "bounds" in ex:
                ex["bounds"] = tuple(tuple(b) for b in ex["bounds"])
            cfg.excitation = ExcitationSpec(**ex)
        if "identify" in d:
            _check_keys("identify", d["identify"], _names(IdentifyConfig))
            ident = dict(d["identify"])
            train = ident.pop("train", None)
            cfg.identify = IdentifyConfig(**ident)
            if train is not None:
                _check_keys("identify.train", train, _names(TrainConfig))
                cfg.identify.train = TrainConfig.from_dict({**_default_train().to_dict(), **train})
        if "empc" in d:
            _check_keys("empc", d["empc"], _names(EmpcConfig))
            cfg.empc = EmpcConfig.from_dict({**cfg.empc.to_dict(), **d["empc"]})
        if "scenario" in d:
            _check_keys("scenario", d["scenario"], _names(ScenarioConfig))
            cfg.scenario = ScenarioConfig.from_dict({**cfg.scenario.to_dict(), **d["scenario"]})
        cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


# -- data ---------------------------------------------------------------------

def generate_dataset(seed, cfg: RunConfig) -> Dataset:
    """One excitation experiment at 1 s, started from the steady state of the mean input."""
    spec = ExcitationSpec(**{**asdict(cfg.excitation), "seed": seed})
    U = generate_excitation(spec)
    x0 = steady_state(U.mean(axis=0), cfg.plant)
    return Dataset(1.0, U, simulate_plant(x0, U, 1.0, cfg.plant))


def gen_data(cfg: RunConfig, data_dir):
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, seed in zip(("train", "test"), cfg.data_seeds):
        d = generate_dataset(seed, cfg)
        out[name] = data_dir / f"{name}.csv"
        write_dataset_csv(d, out[name])
        log.info("wrote %s (%d samples, seed %d)", out[name], len(d), seed)
    return out


def load_datasets(data_dir):
    data_dir = Path(data_dir)
    paths = [data_dir / "train.csv", data_dir / "test.csv"]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"dataset not found: {p}")
    return tuple(read_dataset_csv(p) for p in paths)


# -- identification -------------------------------------------------------------

def control_rescale(cfg: RunConfig, timestep=1.0):
    return int(round(cfg.empc.timestep / timestep))


def identify_models(train: Dataset, test: Dataset, cfg: RunConfig):
    """Identify the three models and score them on the test set.

    All models share scalers fitted on the training data. Returns
    ``(models, report)``.
    """
    ic = cfg.identify
    u_scaler, y_scaler = fit_scaler(train.U), fit_scaler(train.Y)
    rescale = control_rescale(cfg, train.timestep)
    timings = {}

    t0 = time.perf_counter()
    sub = identify_subspace(train, ic.subspace_order, ic.subspace_horizon, u_scaler, y_scaler)
    timings["subspace"] = time.perf_counter() - t0
    log.info("subspace model identified in %.1f s", timings["subspace"])

    t0 = time.perf_counter()
    lin = reduce_lifted_dimension(train, ic.lift_start, ic.rank_tol, ic.train, rescale=rescale,
                                  warm_start=ic.warm_start, refine_epochs=ic.refine_epochs,
                                  refine_lr=ic.refine_lr, u_scaler=u_scaler, y_scaler=y_scaler)
    timings["koopman_linear"] = time.perf_counter() - t0
    log.info("linear Koopman model (n=%d) trained in %.1f s", lin.n_lift, timings["koopman_linear"])

    t0 = time.perf_counter()
    nonlin = train_koopman(train, NONLINEAR, ic.nonlinear_lift, ic.train, u_scaler, y_scaler)
    timings["koopman_nonlinear"] = time.perf_counter() - t0
    log.info("nonlinear Koopman model trained in %.1f s", timings["koopman_nonlinear"])

    models = {"subspace": sub, "koopman_linear": lin, "koopman_nonlinear": nonlin}
    mae = {
        "subspace": open_loop_mae(sub, test),
        "koopman_linear": koopman_open_loop_mae(lin, test),
        "koopman_nonlinear": koopman_open_loop_mae(nonlin, test),
    }
    report = {}
    for name, m in mae.items():
        entry = {"mae": [float(v) for v in m], "mae_mean": float(np.mean(m)), "seconds": timings[name]}
        if name != "koopman_nonlinear":
            S = controller_model(models[name], cfg)
            entry["state_dim"] = S.n
            entry["ctrb_rank"] = controllability_rank(S.A, S.B, ic.rank_tol)
            entry["obsv_rank"] = observability_rank(S.A, S.C, ic.rank_tol)
        else:
            entry["state_dim"] = nonlin.n_lift
        report[name] = entry
    return models, report


def controller_model(model, cfg: RunConfig) -> StateSpaceModel:
    """Linear model at the control timestep (exact ZOH rescaling)."""
    if isinstance(model, KoopmanModel):
        model = export_linear(model)
    return rescale_timestep(model, control_rescale(cfg, model.timestep))


def save_models(models, model_dir):
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    for name, m in models.items():
        m.save(model_dir / MODEL_FILES[name])
        if getattr(m, "history", None):
            # training curve of the final fit (the refinement stage after a reduction)
            write_training_log(m.history, model_dir / f"{name}_training.csv")


def load_model(model_dir, name):
    path = Path(model_dir) / MODEL_FILES[name]
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    if name == "subspace":
        return StateSpaceModel.load(path)
    return KoopmanModel.load(path)


def write_identification_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stable = {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in report.items()}
    (out_dir / "identification.json").write_text(json.dumps(stable, indent=2) + "\n")
    with (out_dir / "identification.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mae_T1", "mae_T2", "mae_T3", "mae_mean", "state_dim"])
        for name, v in report.items():
            w.writerow([name, *(repr(x) for x in v["mae"]), repr(v["mae_mean"]), v["state_dim"]])
    return out_dir / "identification.json"


def format_identification(report):
    lines = [f"{'Model':<20}{'T1':>9}{'T2':>9}{'T3':>9}{'Mean':>9}{'n':>5}"]
    for name, v in report.items():
        a, b, c = v["mae"]
        lines.append(f"{name:<20}{a:>9.3f}{b:>9.3f}{c:>9.3f}{v['mae_mean']:>9.3f}{v['state_dim']:>5}")
    return "\n".join(lines)


# -- closed loop -----------------------------------------------------------------

def simulate(cfg: RunConfig, model_dir, controller="koopman", plant="surrogate", progress=None):
    """Run the configured scenario; returns (trajectory, ledger)."""
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller model {controller!r}; choose from {sorted(CONTROLLERS)}")
    if plant not in PLANTS:
        raise ConfigError(f"unknown plant backend {plant!r}; choose from {sorted(PLANTS)}")
    ctrl = controller_model(load_model(model_dir, CONTROLLERS[controller]), cfg)
    plant_model = load_model(model_dir, "koopman_nonlinear") if plant == "koopman" else None
    return run_closed_loop(ctrl, cfg.empc, cfg.scenario, PLANTS[plant], cfg.plant, plant_model,
                           seed=cfg.seed, progress=progress)


def run_dir(out_dir, controller, plant):
    return Path(out_dir) / f"{controller}_{plant}"


def write_simulation(traj, ledger, cfg: RunConfig, out_dir, label=""):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj.write_csv(out_dir / "trajectory.csv")
    traj.write_diagnostics_csv(out_dir / "diagnostics.csv")
    ledger.save(out_dir / "ledger.json")
    write_trajectory_plots(traj, out_dir, cfg.empc, label)
    return out_dir


def report(baseline_path, koopman_path, out_dir=None):
    rows = compare_report(CostLedger.load(baseline_path), CostLedger.load(koopman_path))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_report_csv(rows, Path(out_dir) / "report.csv")
        (Path(out_dir) / "report.txt").write_text(format_report(rows) + "\n")
    return rows
