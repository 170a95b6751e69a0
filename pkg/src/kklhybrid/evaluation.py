"""Metrics, full-horizon prediction and experiment-level analyses."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .models import ModelParams, ModelSpec, RolloutOutput
from .observer import KklParams, z_rollout
from .residuum import GruParams, gru_rollout
from .systems import DataError, SystemData, Trajectory, drop_sim_window


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if pred.shape != target.shape:
        raise DataError(f"rmse: prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred, target


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def rmse_over_time(pred, target) -> np.ndarray:
    """Entry ``n`` is the RMSE over steps ``0..n``."""
    pred, target = _pair(pred, target)
    per_step = np.sum((pred - target) ** 2, axis=1)
    counts = np.arange(1, len(per_step) + 1) * pred.shape[1]
    return np.sqrt(np.cumsum(per_step) / counts)


def aggregate(values) -> tuple[float, float]:
    """Mean and (population) standard deviation."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise DataError("aggregate: no values")
    return float(values.mean()), float(values.std())


def fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    rmse: float
    rmse_over_time: np.ndarray
    components: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        values = [self.rmse, *self.components.values()]
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(self.rmse_over_time)):
            raise ArithmeticError("metrics report contains non-finite values")

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {"rmse": self.rmse, "rmse_over_time": self.rmse_over_time.tolist(),
             "components": dict(self.components), "config_fingerprint": self.config_fingerprint}
        if self.extra:
            d["extra"] = dict(self.extra)
        if include_runtime:
            d["runtime_seconds"] = self.runtime_seconds
        return d

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), sort_keys=True)


def predict(spec: ModelSpec, params: ModelParams, data: Trajectory, sim: Trajectory, warmup: int) -> RolloutOutput:
    """Roll the model over the full horizon as one window."""
    return models.rollout(spec, params, models.full_batch(data, sim), warmup)


def _target(sd: SystemData) -> np.ndarray:
    return (sd.truth if sd.truth is not None else sd.data).values


def metrics(out: RolloutOutput, sd: SystemData, sim: Trajectory, runtime: float = 0.0, config: dict | None = None,
            ) -> MetricsReport:
    target = _target(sd)
    y = out.y.data
    comps = {}
    if out.s is not None:
        comps["s"] = rmse(out.s.data, sim.values)
    if out.y_ovs is not None:
        comps["y_ovs"] = rmse(out.y_ovs.data, target)
    if out.y_nonovs is not None and out.y_ovs is not None:
        comps["y_nonovs"] = rmse(out.y_nonovs.data, target - out.y_ovs.data)
    return MetricsReport(rmse(y, target), rmse_over_time(y, target), comps, runtime,
                         fingerprint(config or {}))


def evaluate(spec: ModelSpec, params: ModelParams, sd: SystemData, sim: Trajectory, warmup: int,
             config: dict | None = None) -> tuple[MetricsReport, RolloutOutput]:
    t0 = time.perf_counter()
    out = predict(spec, params, sd.data, sim, warmup)
    return metrics(out, sd, sim, time.perf_counter() - t0, config), out


def write_rollout_csv(out: RolloutOutput, sd: SystemData, sim: Trajectory, path) -> None:
    """Columns: time, measurement, prediction and the traced components (first channel)."""
    n = out.steps
    cols = {"t": sd.data.times, "y_hat": sd.data.values[:, 0], "y": out.y.data[:, 0],
            "s_hat": np.nan_to_num(sim.values[:, 0], nan=np.nan)}
    for name in ("s", "y_ovs", "y_nonovs"):
        val = getattr(out, name)
        cols[name] = val.data[:, 0] if val is not None else np.full(n, np.nan)
    if sd.truth is not None:
        cols["y_true"] = sd.truth.values[:, 0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for row in zip(*cols.values()):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- analyses

def forgetting_test(params: KklParams | GruParams, inputs, x0_pairs, batch: int = 1, warmup: int = 0) -> list:
    """``||state_n - state'_n||_inf`` for rollouts from paired initial states under identical inputs.

    For KKL parameters ``inputs`` is the simulator block; for a GRU it is the
    measurement block used as teacher during ``warmup`` (control absent).
    """
    curves = []
    for a, b in x0_pairs:
        if isinstance(params, KklParams):
            za = z_rollout(params, inputs, batch, np.atleast_2d(a)).data
            zb = z_rollout(params, inputs, batch, np.atleast_2d(b)).data
        else:
            za = np.vstack([s.data for s in gru_rollout(params, inputs, warmup, batch, x0=np.atleast_2d(a)).states])
            zb = np.vstack([s.data for s in gru_rollout(params, inputs, warmup, batch, x0=np.atleast_2d(b)).states])
        diff = np.abs(za - zb).reshape(-1, batch * za.shape[1])
        curves.append(diff.max(axis=1))
    return curves


@dataclass
class BufferingResult:
    rmse_full: float
    rmse_gapped: float
    gap_start: int
    gap_length: int

    @property
    def relative_increase(self) -> float:
        return (self.rmse_gapped - self.rmse_full) / self.rmse_full


def buffering_ablation(spec: ModelSpec, params: ModelParams, sd: SystemData, sim: Trajectory, warmup: int,
                       gap_start: int, gap_length: int) -> BufferingResult:
    """Same trained model evaluated with the full simulator and with a removed window."""
    target = _target(sd)
    full = predict(spec, params, sd.data, sim, warmup)
    gapped_sim = drop_sim_window(sim, gap_start, gap_length, sd.spec.train_length)
    gapped = predict(spec, params, sd.data, gapped_sim, warmup)
    return BufferingResult(rmse(full.y.data, target), rmse(gapped.y.data, target), gap_start, gap_length)


def learned_sim_fill(out: RolloutOutput, sim: Trajectory) -> Trajectory:
    """Buffered simulator trajectory implied by a (gapped) KKL rollout."""
    return models.buffer_sim(sim, out.s.data)


def nonovs_decay(out: RolloutOutput, train_length: int, window: int = 200) -> float:
    """Ratio of late to early ``max |y^v|``: last ``window`` steps vs first ``window`` training steps."""
    yv = np.abs(out.y_nonovs.data)
    early = yv[: min(window, train_length)].max()
    late = yv[-window:].max()
    return float(late / early) if early > 0 else 0.0
