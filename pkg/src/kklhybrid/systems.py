"""Benchmark datasets: measurement trajectory plus simulator trajectory.

System i (damped oscillation) and iv (forced Van der Pol) are generated from
their equations. Systems ii, iii and v come from lab measurements; they can be
ingested from CSV, otherwise deterministic synthetic stand-ins are produced
(see the ``*_standin`` docstrings for exactly what those contain).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class IntegrationError(ArithmeticError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled multivariate series ``values[n] ~ t0 + n * dt``."""
    values: np.ndarray
    dt: float
    t0: float = 0.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise DataError(f"trajectory needs shape (N>=1, d), got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if mask.shape[0] != values.shape[0]:
                raise DataError(f"mask length {mask.shape[0]} != trajectory length {values.shape[0]}")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
            check = values[mask]
        else:
            check = values
        if not np.all(np.isfinite(check)):
            raise DataError("trajectory contains non-finite unmasked values")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def available(self) -> np.ndarray:
        return np.ones(len(self), dtype=bool) if self.mask is None else self.mask

    def window(self, start: int, length: int) -> "Trajectory":
        mask = None if self.mask is None else self.mask[start:start + length]
        return Trajectory(self.values[start:start + length], self.dt, self.t0 + start * self.dt, mask)


@dataclass(frozen=True)
class SystemSpec:
    system_id: str
    horizon: int
    train_length: int
    warmup: int
    noise_var: float
    seed: int = 0
    dt: float = 1.0

    def __post_init__(self):
        if self.system_id not in SYSTEM_IDS:
            raise DataError(f"unknown system {self.system_id!r}; expected one of {SYSTEM_IDS}")
        if not 0 < self.train_length <= self.horizon:
            raise DataError("train_length must lie in (0, horizon]")
        if not 0 <= self.warmup < self.train_length:
            raise DataError("warmup must be smaller than train_length")
        if self.noise_var < 0:
            raise DataError("noise variance must be non-negative")


@dataclass(frozen=True)
class SystemData:
    """Measurements, simulator output and (when known) the noise-free truth."""
    data: Trajectory
    sim: Trajectory
    truth: Trajectory
    spec: SystemSpec
    extras: dict = field(default_factory=dict)


SYSTEM_IDS = ("i", "ii", "iii", "iv", "v")

# horizons from the experiment descriptions; ii/v lengths are stand-in choices
DEFAULT_SPECS = {
    "i": SystemSpec("i", horizon=1500, train_length=600, warmup=50, noise_var=0.1, dt=0.1),
    "ii": SystemSpec("ii", horizon=600, train_length=150, warmup=20, noise_var=0.01, dt=1.0),
    "iii": SystemSpec("iii", horizon=4000, train_length=2000, warmup=50, noise_var=0.01, dt=1.0),
    "iv": SystemSpec("iv", horizon=951, train_length=400, warmup=20, noise_var=0.01, dt=0.1),
    "v": SystemSpec("v", horizon=1200, train_length=400, warmup=50, noise_var=0.01, dt=1.0),
}


def default_spec(system_id: str, **overrides) -> SystemSpec:
    if system_id not in DEFAULT_SPECS:
        raise DataError(f"unknown system {system_id!r}; expected one of {SYSTEM_IDS}")
    return replace(DEFAULT_SPECS[system_id], **overrides)


# ------------------------------------------------------------------ noise

def add_noise(traj: Trajectory, noise_var: float, seed: int) -> Trajectory:
    if noise_var < 0:
        raise DataError("noise variance must be non-negative")
    if noise_var == 0:
        return traj
    rng = np.random.default_rng(seed)
    noisy = traj.values + rng.normal(0.0, math.sqrt(noise_var), size=traj.values.shape)
    return Trajectory(noisy, traj.dt, traj.t0, traj.mask)


# --------------------------------------------------------------- system i

def damped_signal(t: np.ndarray) -> np.ndarray:
    return np.sin(0.1 * t) + 2.0 * np.exp(-0.01 * t) * np.sin(t)


def damped_simulator(t: np.ndarray) -> np.ndarray:
    return 0.7 * np.sin(0.1 * t)


def gen_damped(spec: SystemSpec) -> SystemData:
    if spec.system_id != "i":
        raise DataError("gen_damped requires system i")
    t = spec.dt * np.arange(spec.horizon)
    truth = Trajectory(damped_signal(t), spec.dt)
    sim = Trajectory(damped_simulator(t), spec.dt)
    return SystemData(add_noise(truth, spec.noise_var, spec.seed), sim, truth, spec)


# --------------------------------------------------------- systems ii / v

def torsion_transient(t: np.ndarray) -> np.ndarray:
    """Artificial decaying component added to the pendulum measurements."""
    return np.exp(-0.5 * t) * np.sin(50.0 * t)


def _torsion_base(n: np.ndarray, system_id: str) -> tuple[np.ndarray, np.ndarray]:
    if system_id == "ii":
        # two incommensurate modes; the simulator has amplitude and phase errors
        base = np.sin(0.21 * n) + 0.5 * np.sin(0.47 * n + 0.3)
        sim = 0.8 * np.sin(0.21 * n - 0.2) + 0.3 * np.sin(0.47 * n)
    else:
        # slow excitation with a locked 7th-harmonic response
        slow = 0.03
        base = np.sin(slow * n) + 0.4 * np.sin(7 * slow * n + 0.5) * (1.0 + 0.3 * np.cos(slow * n))
        sim = base
    return base, sim


def gen_torsion_standin(spec: SystemSpec, csv_path: str | Path | None = None,
                        columns: Sequence[str] = ("y", "sim")) -> SystemData:
    """Double-torsion pendulum data (system ii) or its pure-learning variant (v).

    With ``csv_path`` the measured angle and its numerical simulation are read
    from the file and the transient ``exp(-0.5 t) sin(50 t)`` is added to the
    measurement at t = 0, 1, 2, ... (sample index). Without a file, the base
    signal is a synthetic stand-in: two sinusoidal modes for ii, a slow
    excitation with a locked harmonic for v. For v the "simulator" is the
    noise-free base itself; it is only used to derive the low-pass substitute.
    """
    if spec.system_id not in ("ii", "v"):
        raise DataError("gen_torsion_standin requires system ii or v")
    if csv_path is not None:
        data_raw = ingest_csv(csv_path, [columns[0]])
        sim = ingest_csv(csv_path, [columns[1]])
        n = np.arange(len(data_raw))
        truth = Trajectory(data_raw.values + torsion_transient(n)[:, None], data_raw.dt, data_raw.t0)
        return SystemData(truth, sim, truth, spec, {"source": str(csv_path)})
    n = np.arange(spec.horizon, dtype=np.float64)
    base, sim_values = _torsion_base(n, spec.system_id)
    truth = Trajectory(base + torsion_transient(n), spec.dt)
    sim = Trajectory(sim_values, spec.dt)
    return SystemData(add_noise(truth, spec.noise_var, spec.seed), sim, truth, spec, {"source": "standin"})


# ------------------------------------------------------------- system iii

def gen_drillstring_standin(spec: SystemSpec, csv_path: str | Path | None = None,
                            columns: Sequence[str] = ("y", "sim")) -> SystemData:
    """Drill-string measurements (system iii), CSV or synthetic stand-in.

    The stand-in is a periodic torsional oscillation (period 150 samples) whose
    measured channel differs from the simulator in phase, amplitude and
    harmonic content, plus a slowly decaying transient the simulator does not
    explain.
    """
    if spec.system_id != "iii":
        raise DataError("gen_drillstring_standin requires system iii")
    if csv_path is not None:
        data = ingest_csv(csv_path, [columns[0]])
        sim = ingest_csv(csv_path, [columns[1]])
        return SystemData(data, sim, data, spec, {"source": str(csv_path)})
    n = np.arange(spec.horizon, dtype=np.float64)
    theta = 2 * np.pi * n / 150.0
    sim = np.sin(theta) + 0.3 * np.sin(2 * theta)
    base = 1.1 * np.sin(theta - 0.3) + 0.25 * np.sin(2 * theta - 0.5) + 0.15 * np.sin(3 * theta)
    transient = 0.5 * np.exp(-n / 400.0) * np.sin(0.9 * n)
    truth = Trajectory(base + transient, spec.dt)
    return SystemData(add_noise(truth, spec.noise_var, spec.seed), Trajectory(sim, spec.dt), truth, spec,
                      {"source": "standin"})


# -------------------------------------------------------------- system iv

VDP_PARAMS = {"a": 5.0, "b": 80.0, "omega": 7.0}
VDP_INIT = (-2.0, 1.0, 0.31, 1.0)


def vdp_rhs(state: np.ndarray, a: float, b: float, omega: float) -> np.ndarray:
    x, y, u, v = state
    return np.array([y, -x + a * (1.0 - x * x) * y + b * u, v, -omega * omega * u])


def rk4_integrate(rhs, state0: Sequence[float], t_end: float, h: float, every: int,
                  t_start: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4; returns (times, states) sampled every ``every`` steps."""
    state = np.asarray(state0, dtype=np.float64)
    steps = int(round((t_end - t_start) / h))
    times, states = [], []
    for k in range(steps + 1):
        t = t_start + k * h
        if k % every == 0:
            times.append(t)
            states.append(state.copy())
        if k == steps:
            break
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)):
            raise IntegrationError(f"non-finite state at t={t + h:.4f}", t + h)
    return np.array(times), np.array(states)


def fit_sine(values: np.ndarray, times: np.ndarray) -> tuple[float, float, float]:
    """Amplitude, angular frequency and phase of the dominant sinusoid.

    The frequency is the periodogram peak refined by a dense 1-D search of the
    least-squares residual; amplitude and phase follow from the linear fit.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    x = x - x.mean()
    dt = times[1] - times[0]
    spec = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), dt) * 2 * np.pi
    k = int(np.argmax(spec[1:]) + 1)
    lo, hi = freqs[max(k - 1, 1)], freqs[min(k + 1, len(freqs) - 1)]

    def lsq(w):
        basis = np.stack([np.sin(w * times), np.cos(w * times), np.ones_like(times)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
        return float(np.sum((basis @ coef - x) ** 2)), coef

    grid = np.linspace(lo, hi, 401)
    k = int(np.argmin([lsq(w)[0] for w in grid]))
    step = grid[1] - grid[0]
    res = minimize_scalar(lambda w: lsq(w)[0], bounds=(grid[k] - step, grid[k] + step), method="bounded",
                          options={"xatol": 1e-12})
    w = float(res.x)
    _, (cs, cc, _) = lsq(w)
    return float(np.hypot(cs, cc)), float(w), float(np.arctan2(cc, cs))


def gen_vdp(spec: SystemSpec, a: float = VDP_PARAMS["a"], b: float = VDP_PARAMS["b"],
            omega: float = VDP_PARAMS["omega"], init: Sequence[float] = VDP_INIT,
            h: float = 0.01, t_start: float = 5.0) -> SystemData:
    """Forced Van der Pol oscillator observed through its position channel.

    Integrates from t=0 with RK4 (step ``h``), keeps samples at ``dt`` from
    ``t_start`` on. The simulator slot holds the sine substitute initialised by
    :func:`fit_sine` on the training part; its parameters are in
    ``extras["sine_init"]``.
    """
    if spec.system_id != "iv":
        raise DataError("gen_vdp requires system iv")
    every = int(round(spec.dt / h))
    t_end = t_start + (spec.horizon - 1) * spec.dt
    times, states = rk4_integrate(lambda s: vdp_rhs(s, a, b, omega), init, t_end, h, every)
    keep = times >= t_start - 1e-9
    times, x = times[keep], states[keep, 0]
    truth = Trajectory(x, spec.dt, t0=float(times[0]))
    data = add_noise(truth, spec.noise_var, spec.seed)
    tr = spec.train_length
    amp, freq, phase = fit_sine(data.values[:tr, 0], times[:tr])
    sim = Trajectory(amp * np.sin(freq * times + phase), spec.dt, t0=float(times[0]))
    return SystemData(data, sim, truth, spec, {"sine_init": (amp, freq, phase)})


def generate(spec: SystemSpec, csv_path: str | Path | None = None) -> SystemData:
    if spec.system_id == "i":
        return gen_damped(spec)
    if spec.system_id in ("ii", "v"):
        return gen_torsion_standin(spec, csv_path)
    if spec.system_id == "iii":
        return gen_drillstring_standin(spec, csv_path)
    return gen_vdp(spec)


# ------------------------------------------------------------- CSV / gaps

def ingest_csv(path: str | Path, columns: Sequence[str], dt: float | None = None,
               time_column: str = "t") -> Trajectory:
    """Read selected channels from a headed CSV with a uniform time column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    missing = [c for c in columns if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}; header is {header}")
    idx = [header.index(c) for c in columns]
    parsed = np.empty((len(body), len(header)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        try:
            parsed[r - 2] = [float(cell) for cell in row]
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value in row {r}: {exc}") from None
    t0 = 0.0
    if time_column in header:
        t = parsed[:, header.index(time_column)]
        t0 = float(t[0])
        if len(t) >= 2:
            step = t[1] - t[0]
            if step <= 0 or not np.allclose(np.diff(t), step, rtol=1e-9, atol=1e-12 * abs(step)):
                raise DataError(f"{path}: time column is not uniformly sampled")
            dt = step if dt is None else dt
    if dt is None:
        dt = 1.0
    return Trajectory(parsed[:, idx], float(dt), t0)


def write_csv(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    path = Path(path)
    names = list(columns)
    stacked = np.column_stack([np.asarray(columns[k], dtype=np.float64).reshape(-1) for k in names])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in stacked:
            writer.writerow([repr(float(v)) for v in row])


def drop_sim_window(sim: Trajectory, start: int, length: int, train_length: int = 0) -> Trajectory:
    """Mark ``[start, start + length)`` of the simulator as unavailable."""
    if length == 0:
        return sim
    if length < 0 or start < 0 or start + length > len(sim):
        raise DataError(f"gap [{start}, {start + length}) outside trajectory of length {len(sim)}")
    if start < train_length:
        raise DataError(f"gap starting at {start} overlaps training region [0, {train_length})")
    mask = sim.available.copy()
    mask[start:start + length] = False
    return Trajectory(sim.values, sim.dt, sim.t0, mask)


def random_gap_start(seed: int, train_length: int, horizon: int, length: int) -> int:
    rng = np.random.default_rng(seed)
    return int(rng.integers(train_length, horizon - length + 1))
