"""GRU transition cell with output feedback, warmup rollouts and residuum heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamBlock, Value

GATES = ("r", "z", "f")


@dataclass
class GruParams(ParamBlock):
    """GRU with control input ``i`` (maps ``W_in_*``), output feedback ``y`` (``W_*``)
    and recurrence (``U_*``). Missing input kinds are stored as ``None``.

    gates: z = sigmoid(W_in_z i + W_z y + U_z x + b_z), f likewise,
    candidate = tanh(W_in_r i + W_r y + U_r (f * x) + b_r),
    x' = z * x + (1 - z) * candidate, output U_o x.
    """
    W_in_r: Value | None
    W_in_z: Value | None
    W_in_f: Value | None
    W_r: Value | None
    W_z: Value | None
    W_f: Value | None
    U_r: Value
    U_z: Value
    U_f: Value
    b_r: Value
    b_z: Value
    b_f: Value
    U_o: Value

    @classmethod
    def init(cls, rng: np.random.Generator, d_x: int, d_fb: int, d_i: int = 0, d_out: int | None = None,
             name: str = "gru") -> "GruParams":
        d_out = d_fb if d_out is None else d_out
        kw = {}
        for g in GATES:
            kw[f"W_in_{g}"] = ad.parameter(ad.uniform_init(rng, (d_x, d_i), fan_in=d_x), name=f"{name}.W_in_{g}") if d_i else None
            kw[f"W_{g}"] = ad.parameter(ad.uniform_init(rng, (d_x, d_fb), fan_in=d_x), name=f"{name}.W_{g}") if d_fb else None
            kw[f"U_{g}"] = ad.parameter(ad.uniform_init(rng, (d_x, d_x)), name=f"{name}.U_{g}")
            kw[f"b_{g}"] = ad.parameter(np.zeros((1, d_x)), name=f"{name}.b_{g}")
        kw["U_o"] = ad.parameter(ad.uniform_init(rng, (d_out, d_x)), name=f"{name}.U_o")
        return cls(**kw)

    @classmethod
    def zeros(cls, d_x: int, d_fb: int, d_i: int = 0, d_out: int | None = None) -> "GruParams":
        d_out = d_fb if d_out is None else d_out
        kw = {}
        for g in GATES:
            kw[f"W_in_{g}"] = ad.parameter(np.zeros((d_x, d_i))) if d_i else None
            kw[f"W_{g}"] = ad.parameter(np.zeros((d_x, d_fb))) if d_fb else None
            kw[f"U_{g}"] = ad.parameter(np.zeros((d_x, d_x)))
            kw[f"b_{g}"] = ad.parameter(np.zeros((1, d_x)))
        kw["U_o"] = ad.parameter(np.zeros((d_out, d_x)))
        return cls(**kw)

    @property
    def d_x(self) -> int:
        return self.U_r.shape[0]

    @property
    def d_fb(self) -> int:
        return 0 if self.W_r is None else self.W_r.shape[1]

    @property
    def d_i(self) -> int:
        return 0 if self.W_in_r is None else self.W_in_r.shape[1]

    @property
    def d_out(self) -> int:
        return self.U_o.shape[0]


class _FusedGru:
    """Stacked weight blocks, built once per rollout so each step needs few tape nodes."""

    def __init__(self, p: GruParams):
        self.p = p
        self.d_x = p.d_x
        gate_rows = []
        for g in ("z", "f"):
            blocks = [w for w in (getattr(p, f"W_in_{g}"), getattr(p, f"W_{g}")) if w is not None]
            gate_rows.append(ad.concat(blocks + [getattr(p, f"U_{g}")], axis=1))
        self.W_gates = ad.concat(gate_rows, axis=0)
        self.b_gates = ad.concat([p.b_z, p.b_f], axis=1)
        cand = [w for w in (p.W_in_r, p.W_r) if w is not None]
        self.W_cand = ad.concat(cand, axis=1) if cand else None

    def step(self, x: Value, y_fb: Value | None, i_n: Value | None) -> Value:
        ext = [v for v in (i_n, y_fb) if v is not None]
        gates = ad.sigmoid(ad.linear(ad.concat(ext + [x], axis=1), self.W_gates, self.b_gates))
        d = self.d_x
        z, f = gates[:, :d], gates[:, d:]
        pre = ad.linear(f * x, self.p.U_r, self.p.b_r)
        if ext:
            pre = pre + ad.linear(ad.concat(ext, axis=1) if len(ext) > 1 else ext[0], self.W_cand)
        cand = ad.tanh(pre)
        return cand + z * (x - cand)


def _check_inputs(p: GruParams, y_fb, i_n):
    if (p.d_fb > 0) != (y_fb is not None):
        raise ad.ShapeError(f"gru_step: feedback dimension {p.d_fb} but feedback {'missing' if y_fb is None else 'given'}")
    if (p.d_i > 0) != (i_n is not None):
        raise ad.ShapeError(f"gru_step: control dimension {p.d_i} but control {'missing' if i_n is None else 'given'}")


def gru_step(p: GruParams, x, y_fb=None, i_n=None) -> Value:
    """One GRU transition ``x[n+1] = f(x[n], y_fb[n], i[n])``; inputs are (batch, dim) rows."""
    x = ad.constant(x)
    y_fb = None if y_fb is None else ad.constant(y_fb)
    i_n = None if i_n is None else ad.constant(i_n)
    _check_inputs(p, y_fb, i_n)
    return _FusedGru(p).step(x, y_fb, i_n)


def linear_output(p: GruParams) -> Callable[[Value, int], Value]:
    return lambda x, n: ad.linear(x, p.U_o)


@dataclass
class GruRollout:
    states: list
    outputs: list
    feedback: list


def gru_rollout(p: GruParams, teacher, warmup: int, batch: int = 1, control=None, x0=None,
                head: Callable[[Value, int], Value] | None = None,
                offset: Sequence[Value] | None = None, steps: int | None = None) -> GruRollout:
    """Roll a GRU over ``steps`` time steps in time-major layout.

    Feedback is ``teacher[n]`` for ``n <= warmup`` and the model's own output
    afterwards, where the output is ``head(x[n], n)`` (default ``U_o x[n]``)
    plus ``offset[n]`` when given. ``teacher`` and ``control`` are
    ``(N * batch, d)`` blocks. Returns states ``x[0..N-1]`` and the raw head
    outputs for every step.
    """
    teacher = None if teacher is None else ad.constant(teacher)
    control = None if control is None else ad.constant(control)
    if steps is None:
        source = teacher if teacher is not None else control
        if source is None:
            raise ValueError("gru_rollout: number of steps unknown")
        steps = source.shape[0] // batch
    head = head or linear_output(p)
    fused = _FusedGru(p)
    x = ad.constant(np.zeros((batch, p.d_x)) if x0 is None else x0)
    states, outputs, fbs = [], [], []
    for n in range(steps):
        rows = slice(n * batch, (n + 1) * batch)
        states.append(x)
        out = head(x, n)
        outputs.append(out)
        if p.d_fb:
            if n <= warmup:
                fb = teacher[rows, :]
            else:
                fb = out if offset is None else out + offset[n]
        else:
            fb = None
        fbs.append(fb)
        if n == steps - 1:
            break
        i_n = control[rows, :] if p.d_i else None
        x = fused.step(x, fb, i_n)
    return GruRollout(states, outputs, fbs)


def nonovs_init(y_hat, g_of_u) -> Value:
    """Residuum outputs on the warmup horizon that make the combined output equal the data."""
    y_hat, g_of_u = ad.constant(y_hat), ad.constant(g_of_u)
    if y_hat.shape != g_of_u.shape:
        raise ad.ShapeError(f"nonovs_init: length mismatch {y_hat.shape} vs {g_of_u.shape}")
    return y_hat - g_of_u


@dataclass
class DampedHeadParams(ParamBlock):
    """Output ``a * exp(-softplus(b) * t) * tanh(U0 x)``."""
    a: Value
    b: Value
    U0: Value

    @classmethod
    def init(cls, rng: np.random.Generator, d_x: int, d_y: int, rate: float = 0.01, amplitude: float = 1.0) -> "DampedHeadParams":
        b0 = np.log(np.expm1(rate))
        return cls(ad.parameter([[amplitude]], name="damped.a"), ad.parameter([[b0]], name="damped.b"),
                   ad.parameter(ad.uniform_init(rng, (d_y, d_x)), name="damped.U0"))

    def rate(self) -> float:
        return float(np.logaddexp(0.0, self.b.data[0, 0]))


def damped_head(p: DampedHeadParams, states, times) -> Value:
    """Row-wise damped output; ``times`` is a column aligned with ``states``."""
    states, times = ad.constant(states), ad.constant(times)
    if times.shape != (states.shape[0], 1):
        raise ad.ShapeError(f"damped_head: times {times.shape} not aligned with states {states.shape}")
    envelope = ad.exp(ad.mul(ad.softplus(p.b), times) * -1.0)
    return ad.mul(p.a, envelope) * ad.tanh(ad.linear(states, p.U0))


# ---------------------------------------------------------- contraction check

def _inf_norm(m: np.ndarray | None) -> float:
    if m is None or m.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(m), axis=1)))


def _stack_norm(W, U, b, lam: float) -> float:
    parts = [lam * U.data, b.data.T]
    if W is not None:
        parts.insert(0, W.data)
    return _inf_norm(np.hstack(parts))


@dataclass(frozen=True)
class Certificate:
    bound: float
    passes: bool
    sigma_z: float
    sigma_f: float
    phi_r: float


def contraction_certificate(p: GruParams, lam_check: float = 1.0) -> Certificate:
    """Sufficient condition for the output-feedback GRU to contract in the inf-norm.

    ``lam_check`` bounds the state, ``||x||_inf <= lam_check`` (>= 1).
    """
    if lam_check < 1:
        raise ValueError("lam_check must be >= 1")
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    s_z = sig(_stack_norm(p.W_z, p.U_z, p.b_z, lam_check))
    s_f = sig(_stack_norm(p.W_f, p.U_f, p.b_f, lam_check))
    phi_r = float(np.tanh(_stack_norm(p.W_r, p.U_r, p.b_r, lam_check)))
    nU_r, nU_z, nU_f = (_inf_norm(getattr(p, f"U_{g}").data) for g in GATES)
    nW = {g: _inf_norm(None if getattr(p, f"W_{g}") is None else getattr(p, f"W_{g}").data) for g in GATES}
    nU_o = _inf_norm(p.U_o.data)
    inner = (nU_r * (0.25 * lam_check * nU_f + s_f) + nW["r"] * nU_o
             + 0.25 * lam_check * nU_r * nW["f"] * nU_o)
    bound = s_z + (1.0 - s_z) * inner + 0.25 * (lam_check + phi_r) * (nU_z + nW["z"] * nU_o)
    return Certificate(float(bound), bool(bound < 1.0), float(s_z), float(s_f), phi_r)
