"""Trainable KKL observer.

The observer state follows the contracting linear recursion
``z[n+1] = diag(lambda) z[n] + F s[n]`` driven by the simulator output, with
``lambda = sigmoid(eigen_raw)`` in (0, 1) and ``F`` a fixed all-ones matrix.
A learned map ``tstar`` turns ``z`` into simulator-observable states ``u``;
two linear heads map ``u`` to the reconstructed simulator ``s`` and to the
simulator-explained part of the measurements.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamBlock, Value


class ConfigurationError(ValueError):
    """Inconsistent model configuration."""


class UnsupportedOperation(TypeError):
    """Operation not available for this parameter variant."""


@dataclass
class Linear(ParamBlock):
    weight: Value
    bias: Value | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, name: str = "") -> "Linear":
        w = ad.parameter(ad.uniform_init(rng, (d_out, d_in)), name=f"{name}.weight")
        b = ad.parameter(ad.uniform_init(rng, (1, d_out), fan_in=d_in), name=f"{name}.bias") if bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, d_in: int, d_out: int, bias: bool = True) -> "Linear":
        return cls(ad.parameter(np.zeros((d_out, d_in))), ad.parameter(np.zeros((1, d_out))) if bias else None)

    def __call__(self, x) -> Value:
        return ad.linear(x, self.weight, self.bias)


@dataclass
class MLP(ParamBlock):
    layers: list

    @classmethod
    def init(cls, rng, widths, name="mlp") -> "MLP":
        return cls([Linear.init(rng, a, b, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))])

    def __call__(self, x) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


@dataclass
class CouplingLayer(ParamBlock):
    """Affine coupling: the ``cond`` half passes through and sets scale/shift of the other half."""
    hidden: Linear
    out: Linear
    cond: slice
    trans: slice

    def _scale_shift(self, cond_part):
        raw = self.out(ad.relu(self.hidden(cond_part)))
        k = raw.shape[1] // 2
        return raw[:, :k], raw[:, k:]

    def _assemble(self, cond_part, trans_part):
        if self.cond.start == 0:
            return ad.concat([cond_part, trans_part], axis=1)
        return ad.concat([trans_part, cond_part], axis=1)

    def forward(self, x) -> Value:
        x = ad.constant(x)
        c = x[:, self.cond]
        s, t = self._scale_shift(c)
        return self._assemble(c, x[:, self.trans] * ad.exp(s) + t)

    def inverse(self, y) -> Value:
        y = ad.constant(y)
        c = y[:, self.cond]
        s, t = self._scale_shift(c)
        return self._assemble(c, (y[:, self.trans] - t) * ad.exp(-s))


@dataclass
class CouplingNet(ParamBlock):
    layers: list

    @classmethod
    def init(cls, rng, dim: int, hidden: int, n_layers: int = 2, name: str = "coupling") -> "CouplingNet":
        if dim < 2:
            raise ConfigurationError("invertible transform needs at least 2 latent dimensions")
        half = dim // 2
        first, second = slice(0, half), slice(half, dim)
        layers = []
        for i in range(n_layers):
            cond, trans = (first, second) if i % 2 == 0 else (second, first)
            d_c, d_t = cond.stop - cond.start, trans.stop - trans.start
            layers.append(CouplingLayer(Linear.init(rng, d_c, hidden, name=f"{name}.{i}.hidden"),
                                        Linear.init(rng, hidden, 2 * d_t, name=f"{name}.{i}.out"), cond, trans))
        return cls(layers)

    def forward(self, x) -> Value:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def inverse(self, y) -> Value:
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y


@dataclass
class KklParams(ParamBlock):
    eigen_raw: Value
    F: np.ndarray
    tstar: MLP | CouplingNet
    h_head: Linear
    g_head: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d_z: int, d_u: int, d_s: int, d_y: int,
             hidden: int = 100, variant: str = "mlp") -> "KklParams":
        if variant == "mlp":
            tstar = MLP.init(rng, [d_z, hidden, hidden, d_u], name="tstar")
        elif variant == "invertible":
            if d_u != d_z:
                raise ConfigurationError(f"invertible tstar needs d_u == d_z, got d_u={d_u}, d_z={d_z}")
            tstar = CouplingNet.init(rng, d_z, hidden, name="tstar")
        else:
            raise ConfigurationError(f"unknown tstar variant {variant!r}")
        raw = ad.parameter(rng.uniform(0.0, 2.0, size=(1, d_z)), name="eigen_raw")
        return cls(raw, np.ones((d_z, d_s)), tstar,
                   Linear.init(rng, d_u, d_s, name="h_head"), Linear.init(rng, d_u, d_y, name="g_head"))

    @property
    def d_z(self) -> int:
        return self.eigen_raw.shape[1]

    @property
    def invertible(self) -> bool:
        return isinstance(self.tstar, CouplingNet)

    def eigenvalues(self) -> np.ndarray:
        return ad._sigmoid_np(self.eigen_raw.data[0])

    def decay(self) -> Value:
        return ad.sigmoid(self.eigen_raw)


def z_rollout(params: KklParams, sim, batch: int = 1, z0=None) -> Value:
    """Observer states for a time-major simulator block ``(N * batch, d_s)``."""
    sim = ad.constant(sim)
    drive = ad.linear(sim, params.F)
    return ad.diag_scan(params.decay(), drive, batch, z0)


def tstar(params: KklParams, z) -> Value:
    if params.invertible:
        return params.tstar.forward(z)
    return params.tstar(z)


def tstar_inverse(params: KklParams, u) -> Value:
    if not params.invertible:
        raise UnsupportedOperation("tstar_inverse requires the invertible (coupling) variant")
    return params.tstar.inverse(u)


def fu_step(params: KklParams, u, s) -> Value:
    """Explicit OVS dynamics ``u[n+1] = tstar(D tstar^-1(u[n]) + F s[n])``."""
    z = tstar_inverse(params, u)
    z_next = ad.mul(params.decay(), z) + ad.linear(ad.constant(s), params.F)
    return params.tstar.forward(z_next)


def heads(params: KklParams, u) -> tuple[Value, Value]:
    return params.h_head(u), params.g_head(u)


def eigenvalue_collisions(params: KklParams, tol: float = 1e-12) -> list[tuple[int, int]]:
    """Index pairs of (nearly) equal eigenvalues, which break controllability of (D, F)."""
    lam = params.eigenvalues()
    order = np.argsort(lam)
    gaps = np.diff(lam[order])
    return [(int(order[k]), int(order[k + 1])) for k in np.nonzero(gaps <= tol)[0]]


def controllability_matrix(eigenvalues: np.ndarray, F: np.ndarray) -> np.ndarray:
    D = np.diag(eigenvalues)
    blocks, cur = [], F
    for _ in range(len(eigenvalues)):
        blocks.append(cur)
        cur = D @ cur
    return np.hstack(blocks)
