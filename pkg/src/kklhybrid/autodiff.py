"""Dense reverse-mode automatic differentiation on 2-D float64 arrays.

Every :class:`Value` wraps a ``(rows, cols)`` matrix. Operations record a
closure that propagates the incoming gradient to their parents; node ids grow
monotonically, so sorting reachable nodes by id gives a valid reverse
topological order for :func:`backward`.

Broadcasting is limited to the 2-D numpy rules (a dimension of size 1 may be
stretched). Gradients flowing into a stretched operand are summed back down.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""


class ContractError(RuntimeError):
    """A precondition of an autodiff routine was violated."""


class TrainingError(RuntimeError):
    """Numerical failure during optimisation."""

    def __init__(self, message: str, step: int | None = None, last_loss: float | None = None):
        super().__init__(message)
        self.step = step
        self.last_loss = last_loss


class Value:
    __slots__ = ("data", "grad", "id", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable[[], None] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Value: expected at most 2 dimensions, got {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self.id = next(_ids)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        rows, cols = index if isinstance(index, tuple) else (index, slice(None))
        return slice_(self, rows, cols)


def parameter(data, name: str | None = None) -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Value:
    return data if isinstance(data, Value) else Value(data)


def _node(data: np.ndarray, parents: tuple) -> Value:
    needs = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs, _parents=parents if needs else ())


def _accum(v: Value, g: np.ndarray) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad = v.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(op: str, a: Value, b: Value) -> tuple[int, int]:
    out = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
        out.append(max(da, db))
    return tuple(out)


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, -_unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Value:
    """Hadamard product."""
    a, b = constant(a), constant(b)
    _broadcast_shape("hadamard", a, b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _backward
    return out


hadamard = mul


def matmul(a, b) -> Value:
    a, b = constant(a), constant(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                _accum(a, out.grad @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ out.grad)
        out._backward = _backward
    return out


def linear(x, weight, bias=None) -> Value:
    """Row-wise affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = constant(x), constant(weight)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    data = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (1, weight.shape[0]):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        data = data + bias.data
        parents = parents + (bias,)
    out = _node(data, parents)
    if out.requires_grad:
        def _backward():
            g = out.grad
            if x.requires_grad:
                _accum(x, g @ weight.data)
            if weight.requires_grad:
                _accum(weight, g.T @ x.data)
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=0, keepdims=True))
        out._backward = _backward
    return out


# ----------------------------------------------------------------- unary ops

def _unary(x, fwd: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray]) -> Value:
    out = _node(fwd, (x,))
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad * dfn(out.data))
        out._backward = _backward
    return out


def tanh(x) -> Value:
    x = constant(x)
    return _unary(x, np.tanh(x.data), lambda y: 1.0 - y * y)


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Value:
    x = constant(x)
    return _unary(x, _sigmoid_np(x.data), lambda y: y * (1.0 - y))


def relu(x) -> Value:
    x = constant(x)
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda _y: mask.astype(np.float64))


def softplus(x) -> Value:
    x = constant(x)
    data = np.logaddexp(0.0, x.data)
    src = x.data
    return _unary(x, data, lambda _y: _sigmoid_np(src))


def exp(x) -> Value:
    x = constant(x)
    return _unary(x, np.exp(x.data), lambda y: y)


def sin(x) -> Value:
    x = constant(x)
    src = x.data
    return _unary(x, np.sin(src), lambda _y: np.cos(src))


# ------------------------------------------------------------ reductions etc.

def sum_(x) -> Value:
    x = constant(x)
    out = _node(np.array([[x.data.sum()]]), (x,))
    if out.requires_grad:
        def _backward():
            _accum(x, np.full(x.shape, out.grad[0, 0]))
        out._backward = _backward
    return out


def mean(x) -> Value:
    x = constant(x)
    n = x.data.size
    out = _node(np.array([[x.data.mean()]]), (x,))
    if out.requires_grad:
        def _backward():
            _accum(x, np.full(x.shape, out.grad[0, 0] / n))
        out._backward = _backward
    return out


def mse(a, b) -> Value:
    """Mean squared error between two same-shape matrices, as a 1x1 node."""
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = _node(np.array([[np.mean(diff * diff)]]), (a, b))
    if out.requires_grad:
        def _backward():
            g = out.grad[0, 0] * 2.0 / diff.size * diff
            _accum(a, g)
            _accum(b, -g)
        out._backward = _backward
    return out


def concat(values: Sequence, axis: int = 0) -> Value:
    values = [constant(v) for v in values]
    if not values:
        raise ShapeError("concat: no operands")
    other = 1 - axis
    for v in values[1:]:
        if v.shape[other] != values[0].shape[other]:
            raise ShapeError(f"concat: incompatible shapes {values[0].shape} and {v.shape} on axis {axis}")
    out = _node(np.concatenate([v.data for v in values], axis=axis), tuple(values))
    if out.requires_grad:
        sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

        def _backward():
            for v, g in zip(values, np.split(out.grad, sizes, axis=axis)):
                _accum(v, g)
        out._backward = _backward
    return out


def slice_(x, rows=slice(None), cols=slice(None)) -> Value:
    x = constant(x)
    if isinstance(rows, int) or isinstance(cols, int):
        raise ShapeError("slice: integer indices would drop a dimension; use slices")
    data = x.data[rows, cols]
    if data.size == 0:
        raise ShapeError(f"slice: empty selection from shape {x.shape}")
    out = _node(data, (x,))
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(x.data)
            g[rows, cols] = out.grad
            _accum(x, g)
        out._backward = _backward
    return out


def diag_scan(decay, drive, batch: int, init=None) -> Value:
    """Linear recursion ``z[n+1] = decay * z[n] + drive[n]`` in time-major layout.

    ``drive`` has shape ``(N * batch, d)`` where rows ``n*batch:(n+1)*batch``
    hold step ``n``; ``decay`` is ``(1, d)``. The result has the same layout
    with block 0 equal to ``init`` (zeros when omitted); the last drive block
    is unused.
    """
    decay, drive = constant(decay), constant(drive)
    total, d = drive.shape
    if decay.shape != (1, d) or total % batch:
        raise ShapeError(f"diag_scan: decay {decay.shape} / drive {drive.shape} / batch {batch}")
    steps = total // batch
    init = constant(np.zeros((batch, d)) if init is None else init)
    if init.shape != (batch, d):
        raise ShapeError(f"diag_scan: init {init.shape} expected {(batch, d)}")
    lam = decay.data[0]
    w = drive.data.reshape(steps, batch, d)
    z = np.empty_like(w)
    z[0] = init.data
    for n in range(steps - 1):
        z[n + 1] = lam * z[n] + w[n]
    out = _node(z.reshape(total, d), (decay, drive, init))
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(steps, batch, d)
            adj = np.empty_like(g)
            adj[-1] = g[-1]
            for n in range(steps - 2, -1, -1):
                adj[n] = g[n] + lam * adj[n + 1]
            if decay.requires_grad:
                _accum(decay, (adj[1:] * z[:-1]).sum(axis=(0, 1)).reshape(1, d))
            if drive.requires_grad:
                gw = np.zeros_like(w)
                gw[:-1] = adj[1:]
                _accum(drive, gw.reshape(total, d))
            _accum(init, adj[0])
        out._backward = _backward
    return out


# ------------------------------------------------------------------ backward

def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable node."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward: loss must be a scalar node, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    order: list[Value] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad and p.id not in seen)
    order.sort(key=lambda v: v.id, reverse=True)
    loss.grad = np.ones((1, 1))
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward()
        if node._parents:
            # interior nodes are single-use; drop closures so the graph can be freed
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Value], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Value], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(state.m) != len(params):
        raise ContractError("adam_step: optimizer state does not match parameter list")
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {p.name or 'parameter'} at step {state.step_count + 1}",
                                step=state.step_count + 1)
    lr = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()


@dataclass(frozen=True)
class Schedule:
    """Constant learning rate, optionally multiplied by ``factor`` from ``milestone`` on."""
    milestone: int | None = None
    factor: float = 1.0

    def lr(self, step: int, base_lr: float) -> float:
        return lr_schedule(step, base_lr, self)


def lr_schedule(step: int, base_lr: float, schedule: Schedule | None = None) -> float:
    if step < 0:
        raise ContractError("lr_schedule: step must be non-negative")
    if schedule is None or schedule.milestone is None or step < schedule.milestone:
        return base_lr
    return base_lr * schedule.factor


def uniform_init(rng: np.random.Generator, shape: tuple[int, int], fan_in: int | None = None) -> np.ndarray:
    fan_in = shape[1] if fan_in is None else fan_in
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def time_operator(matrix: np.ndarray, x, batch: int) -> Value:
    """Apply a fixed ``(N, N)`` linear operator along time to time-major ``x``.

    ``x`` has shape ``(N * batch, d)``; every window/channel column is mapped
    independently, i.e. ``out[:, b, c] = matrix @ x[:, b, c]``.
    """
    x = constant(x)
    total, d = x.shape
    steps = matrix.shape[0]
    if matrix.shape != (steps, steps) or total != steps * batch:
        raise ShapeError(f"time_operator: operator {matrix.shape} does not fit input {x.shape} with batch {batch}")
    data = (matrix @ x.data.reshape(steps, batch * d)).reshape(total, d)
    out = _node(data, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(steps, batch * d)
            _accum(x, (matrix.T @ g).reshape(total, d))
        out._backward = _backward
    return out


# ------------------------------------------------------------ param blocks

class ParamBlock:
    """Mixin for dataclasses whose fields hold trainable :class:`Value` objects."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Value]]:
        out = []
        for key, item in vars(self).items():
            out.extend(_collect(f"{prefix}{key}", item))
        return out

    def params(self) -> list[Value]:
        return [v for _, v in self.named_params()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_params())
        missing = set(named) - set(state)
        if missing:
            raise ContractError(f"checkpoint is missing parameters {sorted(missing)}")
        for key, value in named.items():
            arr = np.asarray(state[key], dtype=np.float64).reshape(value.shape)
            value.data = arr.copy()


def _collect(name: str, item) -> list[tuple[str, Value]]:
    if isinstance(item, Value):
        return [(name, item)] if item.requires_grad else []
    if isinstance(item, ParamBlock):
        return item.named_params(prefix=name + ".")
    if isinstance(item, (list, tuple)):
        out = []
        for i, sub in enumerate(item):
            out.extend(_collect(f"{name}.{i}", sub))
        return out
    return []
