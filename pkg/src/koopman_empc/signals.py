"""Signal scaling, datasets, excitation design and CSV persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConstantChannel,
    DimensionMismatch,
    EmptyData,
    MissingColumn,
    ParseError,
)

# Hard input limits (u1, u2 in cm^3/s, u3 in kW).
INPUT_HARD_BOUNDS = ((1.3, 11.9), (0.8, 11.5), (0.25, 1.0))
CSV_COLUMNS = ("t", "u1", "u2", "u3", "y1", "y2", "y3")


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        std = np.atleast_1d(np.asarray(self.std, dtype=float))
        if mean.shape != std.shape:
            raise DimensionMismatch("mean and std differ in length")
        if np.any(std <= 0):
            raise ConstantChannel(int(np.argmin(std)))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self):
        return self.mean.size

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def fit_scaler(data) -> Scaler:
    """Per-channel mean and population standard deviation."""
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise EmptyData("need at least two samples to fit a scaler")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for i, s in enumerate(std):
        if s == 0.0:
            raise ConstantChannel(i)
    return Scaler(mean, std)


def _check_dim(s: Scaler, x):
    if x.shape[-1] != s.dim:
        raise DimensionMismatch(f"expected {s.dim} channels, got {x.shape[-1]}")


def transform(s: Scaler, x):
    x = np.asarray(x, dtype=float)
    _check_dim(s, x)
    return (x - s.mean) / s.std


def inverse_transform(s: Scaler, z):
    z = np.asarray(z, dtype=float)
    _check_dim(s, z)
    return z * s.std + s.mean


@dataclass
class Dataset:
    timestep: float
    U: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.U.shape[0] != self.Y.shape[0]:
            raise DimensionMismatch("U and Y must have the same length")
        if not self.timestep > 0:
            raise ValueError("timestep must be positive")

    def __len__(self):
        return self.U.shape[0]

    @property
    def time(self):
        return np.arange(len(self)) * self.timestep

    def within_bounds(self, bounds=INPUT_HARD_BOUNDS, tol=1e-9):
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        return bool(np.all(self.U >= lo - tol) and np.all(self.U <= hi + tol))

    def scaled(self, u_scaler: Scaler, y_scaler: Scaler) -> "Dataset":
        return Dataset(self.timestep, transform(u_scaler, self.U), transform(y_scaler, self.Y))


@dataclass
class ExcitationSpec:
    seed: int = 0
    levels: int = 7
    dwell_range: tuple = (30, 120)
    duration: int = 1800
    bounds: tuple = field(default_factory=lambda: ((3.0, 10.0), (2.0, 11.0), (0.45, 1.0)))

    def validate(self):
        lo_dwell, hi_dwell = self.dwell_range
        if lo_dwell < 1 or hi_dwell < lo_dwell:
            raise ValueError(f"invalid dwell range {self.dwell_range}")
        if self.levels < 1 or self.duration < 0:
            raise ValueError("levels must be >= 1 and duration >= 0")
        if len(self.bounds) != len(INPUT_HARD_BOUNDS):
            raise DimensionMismatch("one (lo, hi) pair per input required")
        for (lo, hi), (hlo, hhi) in zip(self.bounds, INPUT_HARD_BOUNDS):
            if not (hlo <= lo <= hi <= hhi):
                raise ValueError(f"excitation bounds ({lo}, {hi}) outside hard limits ({hlo}, {hhi})")


def _levels(lo, hi, n):
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, n)


def _staircase(rng, grid, dwell_range, duration):
    out = np.empty(duration)
    t = 0
    prev = -1
    while t < duration:
        dwell = int(rng.integers(dwell_range[0], dwell_range[1] + 1))
        if len(grid) > 1:
            idx = prev
            while idx == prev:
                idx = int(rng.integers(len(grid)))
        else:
            idx = 0
        out[t:t + dwell] = grid[idx]
        prev = idx
        t += dwell
    return out


def generate_excitation(spec: ExcitationSpec) -> np.ndarray:
    """Multi-level staircase per input channel, reproducible from ``spec.seed``.

    Each channel draws its own dwell times, so steps on different inputs are
    not aligned. With three or more levels every channel is guaranteed to
    visit at least three distinct values (redrawn otherwise).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cols = []
    for lo, hi in spec.bounds:
        grid = _levels(lo, hi, spec.levels)
        need = min(3, len(grid))
        while True:
            col = _staircase(rng, grid, spec.dwell_range, spec.duration)
            if spec.duration == 0 or len(np.unique(col)) >= need:
                break
        cols.append(col)
    return np.column_stack(cols) if spec.duration else np.empty((0, len(spec.bounds)))


def write_dataset_csv(d: Dataset, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for k in range(len(d)):
            row = [k * d.timestep, *d.U[k], *d.Y[k]]
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    for col in CSV_COLUMNS:
        if col not in header:
            raise MissingColumn(f"column {col!r} missing from {path}")
    idx = [header.index(c) for c in CSV_COLUMNS]
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            data.append([float(row[i]) for i in idx])
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), line=lineno) from None
    if len(data) < 2:
        raise ParseError("need at least two data rows to infer the timestep", line=len(rows))
    arr = np.array(data)
    timestep = float(arr[1, 0] - arr[0, 0])
    return Dataset(timestep, arr[:, 1:4], arr[:, 4:7])


def save_scaler(s: Scaler, path):
    Path(path).write_text(json.dumps(s.to_dict(), indent=2))


def load_scaler(path) -> Scaler:
    return Scaler.from_dict(json.loads(Path(path).read_text()))
