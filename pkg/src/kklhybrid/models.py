"""Model families assembled from the observer, GRU residuum and filters.

All rollouts work on time-major blocks: a batch of ``B`` windows of ``N``
steps is stored as an ``(N * B, d)`` matrix whose rows ``n*B:(n+1)*B`` hold
step ``n`` of every window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import filters
from .autodiff import ParamBlock, Value
from .observer import ConfigurationError, KklParams, Linear, heads, tstar, z_rollout
from .residuum import DampedHeadParams, GruParams, damped_head, gru_rollout, nonovs_init
from .systems import DataError, Trajectory

FAMILIES = ("kkl-rnn", "plain-gru", "hybrid-gru", "residual", "filter-hybrid", "sim-only",
            "scenario-1", "scenario-2", "scenario-3")
SUBSTITUTES = ("none", "trainable-sine", "pretrained-lowpass-gru")


@dataclass
class ModelSpec:
    family: str
    d_y: int = 1
    d_s: int = 1
    d_z: int = 32
    d_u: int | None = None
    d_v: int = 32
    hidden: int = 100
    tstar: str = "mlp"
    head: str = "linear"
    reg_weight: float = 0.0
    cutoff: float | None = None
    fs: float = 10.0
    sim_substitute: str = "none"
    residuum_control: bool = False
    damped_rate: float = 0.01
    damped_amplitude: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.sim_substitute not in SUBSTITUTES:
            raise ConfigurationError(f"unknown sim_substitute {self.sim_substitute!r}")
        if self.head not in ("linear", "damped"):
            raise ConfigurationError(f"unknown residuum head {self.head!r}")
        if self.tstar not in ("mlp", "invertible"):
            raise ConfigurationError(f"unknown tstar variant {self.tstar!r}")
        if self.reg_weight < 0:
            raise ConfigurationError("reg_weight must be >= 0")
        if self.d_u is None:
            self.d_u = self.d_z
        if self.family == "kkl-rnn" and self.tstar == "invertible" and self.d_u != self.d_z:
            raise ConfigurationError("invertible tstar requires d_u == d_z")
        if self.family == "filter-hybrid" and self.cutoff is None:
            raise ConfigurationError("filter-hybrid requires a cutoff")

    @property
    def models_sim(self) -> bool:
        return self.family in ("kkl-rnn", "scenario-1", "scenario-2", "scenario-3")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model key(s) {sorted(unknown)}")
        return cls(**d)


@dataclass
class SineParams(ParamBlock):
    amplitude: Value
    frequency: Value
    phase: Value

    @classmethod
    def init(cls, amplitude: float, frequency: float, phase: float) -> "SineParams":
        return cls(ad.parameter([[amplitude]], "sine.amplitude"), ad.parameter([[frequency]], "sine.frequency"),
                   ad.parameter([[phase]], "sine.phase"))


def sim_substitute_sine(p: SineParams, times) -> Value:
    """``A sin(omega t + phi)`` on the tape; ``times`` is a column."""
    times = ad.constant(np.asarray(times, dtype=np.float64).reshape(-1, 1))
    return ad.mul(p.amplitude, ad.sin(ad.mul(p.frequency, times) + p.phase))


@dataclass
class ModelParams(ParamBlock):
    kkl: KklParams | None = None
    gru: GruParams | None = None
    gru_u: GruParams | None = None
    damped: DampedHeadParams | None = None
    h_head: Linear | None = None
    g_head: Linear | None = None
    sine: SineParams | None = None


def init_params(spec: ModelSpec, rng: np.random.Generator, sine_init=None) -> ModelParams:
    f, dy, ds = spec.family, spec.d_y, spec.d_s
    p = ModelParams()
    if spec.sim_substitute == "trainable-sine":
        if sine_init is None:
            raise ConfigurationError("trainable-sine substitute needs initial (amplitude, frequency, phase)")
        p.sine = SineParams.init(*sine_init)
    if f == "kkl-rnn":
        p.kkl = KklParams.init(rng, spec.d_z, spec.d_u, ds, dy, spec.hidden, spec.tstar)
        d_i = ds if spec.residuum_control else 0
        p.gru = GruParams.init(rng, spec.d_v, dy, d_i, name="residuum")
        if spec.head == "damped":
            p.damped = DampedHeadParams.init(rng, spec.d_v, dy, rate=spec.damped_rate,
                                                    amplitude=spec.damped_amplitude)
    elif f in ("plain-gru", "residual", "filter-hybrid"):
        p.gru = GruParams.init(rng, spec.d_v, dy, 0)
    elif f in ("hybrid-gru", "scenario-1"):
        p.gru = GruParams.init(rng, spec.d_v, dy, ds)
        if f == "scenario-1":
            p.h_head = Linear.init(rng, spec.d_v, ds, name="h_head")
    elif f in ("scenario-2", "scenario-3"):
        ctrl = ds if f == "scenario-3" else 0
        fb = 0 if f == "scenario-3" else dy
        p.gru_u = GruParams.init(rng, spec.d_u, fb, ctrl, d_out=dy, name="gru_u")
        p.gru = GruParams.init(rng, spec.d_v, dy, ctrl, name="gru_v")
        p.h_head = Linear.init(rng, spec.d_u, ds, name="h_head")
    return p


@dataclass
class Batch:
    """Aligned time-major windows."""
    data: np.ndarray
    sim: np.ndarray
    times: np.ndarray
    batch: int
    sim_mask: np.ndarray | None = None
    starts: tuple = ()

    @property
    def steps(self) -> int:
        return self.data.shape[0] // self.batch

    def rows(self, n: int) -> slice:
        return slice(n * self.batch, (n + 1) * self.batch)


def make_batch(data: Trajectory, sim: Trajectory, starts, length: int) -> Batch:
    starts = [int(s) for s in starts]
    for s in starts:
        if s < 0 or s + length > len(data):
            raise DataError(f"window [{s}, {s + length}) outside trajectory of length {len(data)}")
    idx = np.array([np.arange(s, s + length) for s in starts]).T
    B = len(starts)
    d = data.values[idx].reshape(length * B, -1)
    sv = sim.values[idx].reshape(length * B, -1)
    t = data.times[idx].reshape(length * B, 1)
    mask = None if sim.mask is None else sim.mask[idx].reshape(-1)
    return Batch(d, sv, t, B, mask, tuple(starts))


def full_batch(data: Trajectory, sim: Trajectory) -> Batch:
    return make_batch(data, sim, [0], len(data))


@dataclass
class RolloutOutput:
    y: Value
    batch: int
    warmup: int
    s: Value | None = None
    sim_target: Value | None = None
    y_ovs: Value | None = None
    y_nonovs: Value | None = None
    u: Value | None = None
    z: Value | None = None
    v: list = field(default_factory=list)
    learned: Value | None = None
    times: np.ndarray | None = None
    family: str = ""

    @property
    def steps(self) -> int:
        return self.y.shape[0] // self.batch

    def series(self, name: str) -> np.ndarray | None:
        """Window-major numpy view ``(B, N, d)`` of a traced quantity."""
        val = getattr(self, name)
        if val is None:
            return None
        data = val.data if isinstance(val, Value) else np.asarray(val)
        return data.reshape(self.steps, self.batch, -1).transpose(1, 0, 2)


# ----------------------------------------------------------------- helpers

def _sim_input(spec: ModelSpec, params: ModelParams, batch: Batch) -> Value:
    if spec.sim_substitute == "trainable-sine":
        return sim_substitute_sine(params.sine, batch.times)
    if batch.sim_mask is not None:
        return ad.constant(np.where(batch.sim_mask[:, None], np.nan_to_num(batch.sim), 0.0))
    return ad.constant(batch.sim)


def _warmup_then(batch: Batch, warmup: int, steps_out: list) -> Value:
    """Measurements on steps ``0..warmup``, the given per-step outputs afterwards."""
    head = ad.constant(batch.data[: (warmup + 1) * batch.batch])
    tail = steps_out[warmup + 1:]
    return ad.concat([head] + tail, axis=0) if tail else head


def _check_warmup(batch: Batch, warmup: int) -> None:
    if not 0 <= warmup < batch.steps:
        raise DataError(f"warmup {warmup} must be smaller than the window length {batch.steps}")


def _residuum_head(spec: ModelSpec, params: ModelParams, batch: Batch):
    if spec.head == "damped":
        return lambda x, n: damped_head(params.damped, x, batch.times[batch.rows(n)])
    return None


# ---------------------------------------------------------------- rollouts

def buffer_sim(sim: Trajectory, learned) -> Trajectory:
    """Fill unavailable simulator samples with the learned reconstruction."""
    learned = np.asarray(learned, dtype=np.float64).reshape(len(sim), -1)
    if sim.mask is None or sim.mask.all():
        return Trajectory(sim.values, sim.dt, sim.t0)
    if not sim.mask[0]:
        raise DataError("simulator missing at step 0; no previous state to buffer from")
    values = np.where(sim.mask[:, None], np.nan_to_num(sim.values), learned)
    return Trajectory(values, sim.dt, sim.t0)


def _buffered_observer(params: ModelParams, sim: Value, batch: Batch):
    """Step-wise observer that substitutes ``h(u[n])`` for missing simulator samples."""
    kkl = params.kkl
    if batch.sim_mask[: batch.batch].sum() < batch.batch:
        raise DataError("simulator missing at step 0; no previous state to buffer from")
    lam = kkl.decay()
    z = ad.constant(np.zeros((batch.batch, kkl.d_z)))
    zs, us, ss, used = [], [], [], []
    for n in range(batch.steps):
        rows = batch.rows(n)
        u = tstar(kkl, z)
        s, _ = heads(kkl, u)
        avail = batch.sim_mask[rows][:, None].astype(np.float64)
        s_in = sim[rows, :] * avail + s * (1.0 - avail) if not avail.all() else sim[rows, :]
        zs.append(z)
        us.append(u)
        ss.append(s)
        used.append(s_in)
        z = ad.mul(lam, z) + ad.linear(s_in, kkl.F)
    return ad.concat(zs, 0), ad.concat(us, 0), ad.concat(ss, 0), ad.concat(used, 0)


def rollout_kkl_rnn(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    _check_warmup(batch, warmup)
    B = batch.batch
    sim = _sim_input(spec, params, batch)
    kkl = params.kkl
    if batch.sim_mask is not None and not batch.sim_mask.all():
        z, u, s, sim_used = _buffered_observer(params, sim, batch)
    else:
        z = z_rollout(kkl, sim, B)
        u = tstar(kkl, z)
        s, _ = heads(kkl, u)
        sim_used = sim
    g = kkl.g_head(u)
    g_steps = [g[batch.rows(n), :] for n in range(batch.steps)]
    control = sim_used if spec.residuum_control else None
    gr = gru_rollout(params.gru, batch.data, warmup, B, control=control,
                     head=_residuum_head(spec, params, batch), offset=g_steps)
    yv_steps = [nonovs_init(batch.data[batch.rows(n)], g_steps[n]) if n <= warmup else gr.outputs[n]
                for n in range(batch.steps)]
    y_nonovs = ad.concat(yv_steps, 0)
    y = _warmup_then(batch, warmup, [g_steps[n] + yv_steps[n] for n in range(batch.steps)])
    return RolloutOutput(y, B, warmup, s=s, sim_target=sim_used, y_ovs=g, y_nonovs=y_nonovs, u=u, z=z,
                         v=gr.states, times=batch.times, family=spec.family)


def rollout_gru(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    """Plain GRU, or hybrid GRU when the family feeds the simulator as control."""
    _check_warmup(batch, warmup)
    control = None
    if spec.family == "hybrid-gru":
        if batch.sim is None:
            raise DataError("hybrid-gru requires a simulator trajectory")
        if batch.sim_mask is not None and not batch.sim_mask.all():
            raise DataError("hybrid-gru cannot buffer missing simulator samples")
        control = _sim_input(spec, params, batch)
    gr = gru_rollout(params.gru, batch.data, warmup, batch.batch, control=control)
    y = _warmup_then(batch, warmup, gr.outputs)
    return RolloutOutput(y, batch.batch, warmup, v=gr.states, times=batch.times, family=spec.family)


rollout_hybrid_gru = rollout_gru


def rollout_residual(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    _check_warmup(batch, warmup)
    sim = _sim_input(spec, params, batch)
    teacher = ad.constant(batch.data) - sim
    gr = gru_rollout(params.gru, teacher, warmup, batch.batch)
    r = ad.concat(gr.outputs, 0)
    return RolloutOutput(r + sim, batch.batch, warmup, learned=r, v=gr.states,
                         times=batch.times, family=spec.family)


def rollout_filter_hybrid(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    """``lowpass(sim) + highpass(GRU output)``; ``batch.sim`` must already be low-passed."""
    _check_warmup(batch, warmup)
    hp = filters.design_butter1(spec.cutoff, spec.fs, "highpass")
    if batch.steps <= filters.pad_length(hp):
        raise filters.FilterDesignError(f"window of {batch.steps} steps shorter than filter padding")
    gr = gru_rollout(params.gru, batch.data, warmup, batch.batch)
    learned = ad.concat(gr.outputs, 0)
    high = ad.time_operator(filters.filtfilt_operator(hp, batch.steps), learned, batch.batch)
    combined = high + ad.constant(batch.sim)
    y_steps = [combined[batch.rows(n), :] for n in range(batch.steps)]
    y = _warmup_then(batch, warmup, y_steps)
    return RolloutOutput(y, batch.batch, warmup, learned=high, v=gr.states,
                         times=batch.times, family=spec.family)


def rollout_sim_only(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    sim = _sim_input(spec, params, batch)
    return RolloutOutput(sim, batch.batch, warmup, times=batch.times, family=spec.family)


def rollout_scenarios(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    _check_warmup(batch, warmup)
    B = batch.batch
    sim = _sim_input(spec, params, batch)
    if spec.family == "scenario-1":
        gr = gru_rollout(params.gru, batch.data, warmup, B, control=sim)
        s = params.h_head(ad.concat(gr.states, 0))
        y = _warmup_then(batch, warmup, gr.outputs)
        return RolloutOutput(y, B, warmup, s=s, sim_target=sim, v=gr.states, times=batch.times,
                             family=spec.family)
    if spec.family == "scenario-3":
        gu = gru_rollout(params.gru_u, None, warmup, B, control=sim, steps=batch.steps)
        u_states = gu.states
        g_steps = gu.outputs
        gv = gru_rollout(params.gru, batch.data, warmup, B, control=sim, offset=g_steps)
        r_steps = gv.outputs
        v_states = gv.states
    elif spec.family == "scenario-2":
        u_states, v_states, g_steps, r_steps = _coupled_rollout(params, batch, warmup)
    else:
        raise ConfigurationError(f"{spec.family} is not an ablation scenario")
    u = ad.concat(u_states, 0)
    s = params.h_head(u)
    g = ad.concat(g_steps, 0)
    yv_steps = [nonovs_init(batch.data[batch.rows(n)], g_steps[n]) if n <= warmup else r_steps[n]
                for n in range(batch.steps)]
    y = _warmup_then(batch, warmup, [g_steps[n] + yv_steps[n] for n in range(batch.steps)])
    return RolloutOutput(y, B, warmup, s=s, sim_target=sim, y_ovs=g, y_nonovs=ad.concat(yv_steps, 0), u=u,
                         v=v_states, times=batch.times, family=spec.family)


def _coupled_rollout(params: ModelParams, batch: Batch, warmup: int):
    """Two GRUs sharing the same output feedback (data during warmup)."""
    from .residuum import _FusedGru
    B = batch.batch
    fu, fv = _FusedGru(params.gru_u), _FusedGru(params.gru)
    xu = ad.constant(np.zeros((B, params.gru_u.d_x)))
    xv = ad.constant(np.zeros((B, params.gru.d_x)))
    us, vs, gs, rs = [], [], [], []
    for n in range(batch.steps):
        g = ad.linear(xu, params.gru_u.U_o)
        r = ad.linear(xv, params.gru.U_o)
        us.append(xu)
        vs.append(xv)
        gs.append(g)
        rs.append(r)
        if n == batch.steps - 1:
            break
        fb = ad.constant(batch.data[batch.rows(n)]) if n <= warmup else g + r
        xu, xv = fu.step(xu, fb, None), fv.step(xv, fb, None)
    return us, vs, gs, rs


ROLLOUTS = {
    "kkl-rnn": rollout_kkl_rnn,
    "plain-gru": rollout_gru,
    "hybrid-gru": rollout_gru,
    "residual": rollout_residual,
    "filter-hybrid": rollout_filter_hybrid,
    "sim-only": rollout_sim_only,
    "scenario-1": rollout_scenarios,
    "scenario-2": rollout_scenarios,
    "scenario-3": rollout_scenarios,
}


def rollout(spec: ModelSpec, params: ModelParams, batch: Batch, warmup: int) -> RolloutOutput:
    return ROLLOUTS[spec.family](spec, params, batch, warmup)


# ------------------------------------------------------- simulator inputs

def lowpass_sim(sim: Trajectory, cutoff: float, fs: float = 10.0) -> Trajectory:
    lp = filters.design_butter1(cutoff, fs, "lowpass")
    return Trajectory(filters.filtfilt(lp, sim.values), sim.dt, sim.t0, sim.mask)


def pretrain_lowpass_substitute(data: Trajectory, train_length: int, cfg: dict, seed: int = 0) -> Trajectory:
    """Smooth stand-in simulator learned from the low-passed, 2x-downsampled training signal.

    A plain GRU is fitted on the downsampled training part, rolled out over
    the whole (downsampled) horizon and linearly upsampled back.
    """
    from . import training
    lp = filters.design_butter1(cfg["cutoff"], cfg["fs"], "lowpass")
    smooth = filters.downsample(filters.filtfilt(lp, data.values[:train_length]), 2)
    n_full = len(data)
    n_down = -(-n_full // 2)
    spec = ModelSpec("plain-gru", d_y=data.dim, d_s=data.dim, d_v=int(cfg["hidden"]))
    params = init_params(spec, np.random.default_rng(seed))
    train_traj = Trajectory(smooth, data.dt * 2, data.t0)
    training.fit(spec, params, train_traj, train_traj, steps=int(cfg["steps"]), lr=float(cfg["lr"]),
                 subtraj_length=int(cfg["subtraj_length"]), batch_size=int(cfg["batch_size"]),
                 warmup=int(cfg["warmup"]), seed=seed, train_length=len(smooth))
    teacher = np.zeros((n_down, data.dim))
    teacher[: len(smooth)] = smooth
    times = (data.t0 + 2 * data.dt * np.arange(n_down)).reshape(-1, 1)
    batch = Batch(teacher, teacher, times, 1)
    out = rollout_gru(spec, params, batch, int(cfg["warmup"]))
    up = filters.upsample_linear(out.y.data, 2)[:n_full]
    return Trajectory(up, data.dt, data.t0)
