"""Experiment configuration, subtrajectory batching, loss and the optimization loop."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import autodiff as ad
from . import models
from .autodiff import AdamState, Schedule, TrainingError, Value
from .models import Batch, ModelParams, ModelSpec, RolloutOutput
from .observer import ConfigurationError, eigenvalue_collisions
from .systems import DataError, SystemData, SystemSpec, Trajectory, default_spec, generate

CHECKPOINT_VERSION = 1


@dataclass
class ExperimentConfig:
    system_id: str
    model: ModelSpec
    lr: float = 1e-3
    train_steps: int = 300
    subtraj_length: int = 100
    batch_size: int = 50
    warmup: int = 50
    schedule_milestone: int | None = None
    schedule_factor: float = 1.0
    seed: int = 0
    output_dir: str = "runs"
    data: dict = field(default_factory=dict)
    substitute: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.train_steps < 0:
            raise ConfigurationError("train_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup < self.subtraj_length:
            raise ConfigurationError(f"warmup {self.warmup} must be smaller than subtraj_length {self.subtraj_length}")
        unknown = set(self.data) - {f.name for f in fields(SystemSpec)} - {"csv", "csv_columns"}
        if unknown:
            raise ConfigurationError(f"unknown data key(s) {sorted(unknown)}")
        unknown = set(self.substitute) - set(SUBSTITUTE_DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown substitute key(s) {sorted(unknown)}")

    @property
    def reg_weight(self) -> float:
        return self.model.reg_weight

    @property
    def cutoff(self) -> float | None:
        return self.model.cutoff

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.schedule_milestone, self.schedule_factor)

    def system_spec(self) -> SystemSpec:
        overrides = {k: v for k, v in self.data.items() if k not in ("csv", "csv_columns")}
        overrides.setdefault("seed", self.seed)
        return default_spec(self.system_id, **overrides)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    # --------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        train = {"lr": self.lr, "steps": self.train_steps, "subtraj_length": self.subtraj_length,
                 "batch_size": self.batch_size, "warmup": self.warmup}
        if self.schedule_milestone is not None:
            train["schedule_milestone"] = self.schedule_milestone
            train["schedule_factor"] = self.schedule_factor
        out = {"system": self.system_id, "seed": self.seed, "output_dir": self.output_dir,
               "train": train, "model": self.model.to_dict()}
        if self.data:
            out["data"] = dict(self.data)
        if self.substitute:
            out["substitute"] = dict(self.substitute)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        top = {"system", "seed", "output_dir", "train", "model", "data", "substitute"}
        unknown = set(d) - top
        if unknown:
            raise ConfigurationError(f"unknown config key(s) {sorted(unknown)}")
        for key in ("system", "model"):
            if key not in d:
                raise ConfigurationError(f"missing config key {key!r}")
        train = dict(d.get("train", {}))
        names = {"lr": "lr", "steps": "train_steps", "subtraj_length": "subtraj_length",
                 "batch_size": "batch_size", "warmup": "warmup", "schedule_milestone": "schedule_milestone",
                 "schedule_factor": "schedule_factor"}
        unknown = set(train) - set(names)
        if unknown:
            raise ConfigurationError(f"unknown train key(s) {sorted('train.' + k for k in unknown)}")
        kw = {names[k]: v for k, v in train.items()}
        try:
            model = ModelSpec.from_dict(d["model"])
        except TypeError as exc:
            raise ConfigurationError(f"invalid model section: {exc}") from exc
        return cls(system_id=str(d["system"]), model=model, seed=int(d.get("seed", 0)),
                   output_dir=d.get("output_dir", "runs"), data=dict(d.get("data", {})),
                   substitute=dict(d.get("substitute", {})), **kw)


SUBSTITUTE_DEFAULTS = {"hidden": 32, "steps": 1000, "lr": 1e-3, "subtraj_length": 125, "warmup": 50,
                       "batch_size": 50, "cutoff": 0.1, "fs": 10.0}


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def loads_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        preset = preset_path(path.name) if path.parent == Path("presets") or not path.parent.parts else None
        if preset is None or not preset.exists():
            raise ConfigurationError(f"config file {path} not found")
        path = preset
    return loads_config(path.read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))


# ------------------------------------------------------------------ presets

def _p(system, family, steps, subtraj, warmup, d_v, **model):
    sched = model.pop("schedule", None)
    substitute = model.pop("substitute_cfg", {})
    spec = ModelSpec(family, d_v=d_v, **model)
    cfg = ExperimentConfig(system, spec, lr=1e-3, train_steps=steps, subtraj_length=subtraj, batch_size=50,
                           warmup=warmup, substitute=substitute)
    if sched:
        cfg.schedule_milestone, cfg.schedule_factor = sched
    return cfg


def build_presets() -> dict[str, ExperimentConfig]:
    """Hyperparameter presets per benchmark system and model family."""
    pre = {}
    # i) damped oscillation
    pre["system_i_kklrnn"] = _p("i", "kkl-rnn", 300, 100, 50, 32, d_z=32, hidden=100, head="damped",
                                damped_rate=1 / 60)
    for fam, tag in (("plain-gru", "gru"), ("hybrid-gru", "hybridgru"), ("residual", "residual")):
        pre[f"system_i_{tag}"] = _p("i", fam, 300, 100, 50, 64)
    pre["system_i_filter"] = _p("i", "filter-hybrid", 300, 100, 50, 64, cutoff=0.05)
    pre["system_i_sim"] = _p("i", "sim-only", 0, 100, 50, 64)
    for k in (1, 2, 3):
        pre[f"system_i_scenario{k}"] = _p("i", f"scenario-{k}", 300, 100, 50, 64 if k == 1 else 32,
                                          d_u=None if k == 1 else 32)
    # ii) torsion pendulum with transient
    pre["system_ii_kklrnn"] = _p("ii", "kkl-rnn", 250, 50, 20, 32, d_z=64, hidden=100, reg_weight=0.5)
    pre["system_ii_gru"] = _p("ii", "plain-gru", 1000, 50, 20, 96, schedule=(800, 0.05))
    pre["system_ii_hybridgru"] = _p("ii", "hybrid-gru", 250, 50, 20, 96)
    pre["system_ii_residual"] = _p("ii", "residual", 250, 50, 20, 96)
    pre["system_ii_filter"] = _p("ii", "filter-hybrid", 250, 50, 20, 96, cutoff=0.1)
    pre["system_ii_sim"] = _p("ii", "sim-only", 0, 50, 20, 96)
    # iii) drill string
    pre["system_iii_kklrnn"] = _p("iii", "kkl-rnn", 250, 500, 50, 32, d_z=64, hidden=100, reg_weight=0.5)
    pre["system_iii_gru"] = _p("iii", "plain-gru", 300, 500, 50, 96)
    pre["system_iii_hybridgru"] = _p("iii", "hybrid-gru", 250, 500, 50, 96)
    pre["system_iii_residual"] = _p("iii", "residual", 250, 500, 50, 96)
    pre["system_iii_filter"] = _p("iii", "filter-hybrid", 250, 500, 50, 96, cutoff=0.05)
    pre["system_iii_sim"] = _p("iii", "sim-only", 0, 500, 50, 96)
    # iv) Van der Pol, pure learning with a trainable sine in place of a simulator
    sine = {"sim_substitute": "trainable-sine"}
    pre["system_iv_kklrnn"] = _p("iv", "kkl-rnn", 500, 200, 20, 32, d_z=32, hidden=100, reg_weight=0.5, **sine)
    pre["system_iv_gru"] = _p("iv", "plain-gru", 800, 200, 20, 64)
    pre["system_iv_hybridgru"] = _p("iv", "hybrid-gru", 500, 200, 20, 64, **sine)
    pre["system_iv_residual"] = _p("iv", "residual", 500, 200, 20, 64, **sine)
    pre["system_iv_sim"] = _p("iv", "sim-only", 500, 200, 20, 64, **sine)
    # v) torsion pendulum without simulator: pretrained low-pass GRU substitute
    lp = {"sim_substitute": "pretrained-lowpass-gru", "substitute_cfg": dict(SUBSTITUTE_DEFAULTS)}
    pre["system_v_kklrnn"] = _p("v", "kkl-rnn", 150, 100, 50, 32, d_z=32, hidden=100, **lp)
    pre["system_v_residual"] = _p("v", "residual", 500, 100, 50, 64, **lp)
    pre["system_v_obsgru"] = _p("v", "scenario-3", 150, 100, 50, 32, d_u=32, **lp)
    pre["system_v_gru"] = _p("v", "plain-gru", 1151, 100, 50, 96)
    pre["system_v_sim"] = _p("v", "sim-only", 0, 100, 50, 64, **lp)
    return pre


def preset_path(name: str) -> Path:
    name = name if name.endswith(".toml") else f"{name}.toml"
    return Path(str(resources.files("kklhybrid") / "presets" / name))


def load_preset(name: str) -> ExperimentConfig:
    return load_config(preset_path(name))


def write_presets(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, cfg in build_presets().items():
        path = directory / f"{name}.toml"
        save_config(cfg, path)
        paths.append(path)
    return paths


# ----------------------------------------------------------------- batching

def sample_starts(train_length: int, subtraj_length: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    if subtraj_length > train_length:
        raise DataError(f"subtrajectory length {subtraj_length} exceeds training region {train_length}")
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, train_length - subtraj_length + 1, size=batch_size)


def sample_batch(data: Trajectory, sim: Trajectory, subtraj_length: int, batch_size: int, seed: int, step: int,
                 train_length: int | None = None) -> Batch:
    """Windows with uniformly random (with replacement) starts inside the training region."""
    train_length = len(data) if train_length is None else train_length
    starts = sample_starts(train_length, subtraj_length, batch_size, seed, step)
    return models.make_batch(data, sim, starts, subtraj_length)


# --------------------------------------------------------------------- loss

def loss(out: RolloutOutput, y_hat, reg_weight: float = 0.0) -> Value:
    """MSE of predictions after warmup, plus simulator reconstruction and y^v penalty.

    ``y_hat`` is the time-major measurement block aligned with ``out.y``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(out.y.shape)
    start = 0 if out.family == "sim-only" else (out.warmup + 1) * out.batch
    total = ad.mse(out.y[start:, :], ad.constant(y_hat[start:]))
    if out.s is not None:
        total = total + ad.mse(out.s, out.sim_target)
    if out.y_nonovs is not None and reg_weight:
        total = total + ad.mse(out.y_nonovs, ad.constant(np.zeros(out.y_nonovs.shape))) * reg_weight
    return total


# --------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    config: ExperimentConfig
    params: ModelParams
    history: list
    sim_input: Trajectory
    collisions: list = field(default_factory=list)


def fit(spec: ModelSpec, params: ModelParams, data: Trajectory, sim: Trajectory, *, steps: int, lr: float,
        subtraj_length: int, batch_size: int, warmup: int, seed: int, train_length: int,
        schedule: Schedule | None = None, reg_weight: float = 0.0) -> tuple[list, list]:
    """Run Adam on random training windows; returns (loss history, eigenvalue collision reports)."""
    plist = params.params()
    state = AdamState.for_params(plist, lr=lr)
    history, collisions = [], []
    last = math.nan
    for step in range(steps):
        batch = sample_batch(data, sim, subtraj_length, batch_size, seed, step, train_length)
        out = models.rollout(spec, params, batch, warmup)
        total = loss(out, batch.data, reg_weight)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}; last finite loss {last}", step=step,
                                last_loss=last)
        ad.zero_grads(plist)
        if plist:
            ad.backward(total)
            lr_now = ad.lr_schedule(step, lr, schedule)
            try:
                ad.adam_step(plist, state, lr_now)
            except TrainingError as exc:
                raise TrainingError(f"{exc}; last finite loss {value}", step=step, last_loss=value) from exc
        else:
            lr_now = ad.lr_schedule(step, lr, schedule)
        history.append({"step": step, "loss": value, "lr": lr_now})
        last = value
        if params.kkl is not None:
            hits = eigenvalue_collisions(params.kkl)
            if hits:
                collisions.append({"step": step, "pairs": hits})
    return history, collisions


def prepare_sim(cfg: ExperimentConfig, sd: SystemData) -> Trajectory:
    """Simulator trajectory as seen by the model family (raw, low-passed or substitute)."""
    spec = cfg.model
    if spec.sim_substitute == "pretrained-lowpass-gru":
        sub = dict(SUBSTITUTE_DEFAULTS, **cfg.substitute)
        return models.pretrain_lowpass_substitute(sd.data, sd.spec.train_length, sub, seed=cfg.seed)
    if spec.family == "filter-hybrid":
        return models.lowpass_sim(sd.sim, spec.cutoff, spec.fs)
    return sd.sim


def load_system(cfg: ExperimentConfig) -> SystemData:
    csv_path = cfg.data.get("csv")
    return generate(cfg.system_spec(), csv_path)


def train(cfg: ExperimentConfig, sd: SystemData | None = None, sim_input: Trajectory | None = None) -> TrainResult:
    sd = load_system(cfg) if sd is None else sd
    if cfg.subtraj_length > sd.spec.train_length:
        raise DataError(f"subtrajectory length {cfg.subtraj_length} exceeds training region {sd.spec.train_length}")
    sim = prepare_sim(cfg, sd) if sim_input is None else sim_input
    rng = np.random.default_rng(cfg.seed)
    params = models.init_params(cfg.model, rng, sine_init=sd.extras.get("sine_init"))
    history, collisions = fit(cfg.model, params, sd.data, sim, steps=cfg.train_steps, lr=cfg.lr,
                              subtraj_length=cfg.subtraj_length, batch_size=cfg.batch_size, warmup=cfg.warmup,
                              seed=cfg.seed, train_length=sd.spec.train_length, schedule=cfg.schedule,
                              reg_weight=cfg.reg_weight)
    return TrainResult(cfg, params, history, sim, collisions)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(result: TrainResult, path) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "config": result.config.to_dict(),
        "params": {k: v.tolist() for k, v in result.params.state_dict().items()},
        "sim_input": result.sim_input.values.tolist(),
        "sim_dt": result.sim_input.dt,
        "sim_t0": result.sim_input.t0,
    }
    Path(path).write_text(json.dumps(blob))


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: ModelParams
    sim_input: Trajectory


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg = ExperimentConfig.from_dict(blob["config"])
    sine_init = (0.0, 0.0, 0.0) if cfg.model.sim_substitute == "trainable-sine" else None
    params = models.init_params(cfg.model, np.random.default_rng(0), sine_init=sine_init)
    params.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in blob["params"].items()})
    sim = Trajectory(np.asarray(blob["sim_input"], dtype=np.float64), blob["sim_dt"], blob.get("sim_t0", 0.0))
    return Checkpoint(cfg, params, sim)


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for row in history:
            writer.writerow([row["step"], repr(row["loss"]), repr(row["lr"])])
