"""First-order Butterworth filters, zero-phase filtering and factor-2 resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class BiquadCoeffs:
    b: tuple
    a: tuple
    kind: str
    cutoff_hz: float
    fs_hz: float

    @property
    def pole(self) -> float:
        return -self.a[1]

    def response(self, freq_hz) -> np.ndarray:
        """Complex frequency response at ``freq_hz``."""
        zinv = np.exp(-2j * np.pi * np.asarray(freq_hz, dtype=np.float64) / self.fs_hz)
        return (self.b[0] + self.b[1] * zinv) / (self.a[0] + self.a[1] * zinv)


def design_butter1(cutoff_hz: float, fs_hz: float = 10.0, kind: str = "lowpass") -> BiquadCoeffs:
    """Order-1 digital Butterworth via the bilinear transform with prewarping."""
    if not 0 < cutoff_hz < fs_hz / 2:
        raise FilterDesignError(f"cutoff {cutoff_hz} Hz must lie in (0, {fs_hz / 2}) for fs={fs_hz} Hz")
    k = math.tan(math.pi * cutoff_hz / fs_hz)
    a = (1.0, (k - 1.0) / (k + 1.0))
    if kind == "lowpass":
        b = (k / (1.0 + k), k / (1.0 + k))
    elif kind == "highpass":
        b = (1.0 / (1.0 + k), -1.0 / (1.0 + k))
    else:
        raise FilterDesignError(f"unknown filter kind {kind!r}")
    return BiquadCoeffs(b, a, kind, cutoff_hz, fs_hz)


def _steady_state(c: BiquadCoeffs) -> float:
    # state of the transposed direct form II after a unit step has settled
    return c.b[1] - c.a[1] * (c.b[0] + c.b[1]) / (c.a[0] + c.a[1])


def lfilter(c: BiquadCoeffs, x: np.ndarray, zi: np.ndarray | float = 0.0) -> np.ndarray:
    """Transposed direct form II along axis 0."""
    b0, b1 = c.b
    a1 = c.a[1]
    state = np.array(zi, dtype=np.float64) * np.ones(x.shape[1:])
    out = np.empty_like(x, dtype=np.float64)
    for n in range(x.shape[0]):
        y = b0 * x[n] + state
        state = b1 * x[n] - a1 * y
        out[n] = y
    return out


def pad_length(c: BiquadCoeffs) -> int:
    return 3 * max(len(c.a), len(c.b))


def filtfilt(c: BiquadCoeffs, x) -> np.ndarray:
    """Zero-phase forward-backward filtering along axis 0.

    The series is extended at both ends by odd reflection; each pass starts
    from the steady-state filter state scaled by its first sample.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    npad = pad_length(c)
    if x.shape[0] <= npad:
        raise FilterDesignError(f"series of length {x.shape[0]} too short; need more than {npad} samples")
    left = 2 * x[0] - x[npad:0:-1]
    right = 2 * x[-1] - x[-2:-npad - 2:-1]
    ext = np.concatenate([left, x, right], axis=0)
    zi = _steady_state(c)
    fwd = lfilter(c, ext, zi * ext[0])
    bwd = lfilter(c, fwd[::-1], zi * fwd[-1])[::-1]
    out = bwd[npad:-npad]
    return out[:, 0] if squeeze else out


@lru_cache(maxsize=64)
def _operator(b: tuple, a: tuple, kind: str, cutoff: float, fs: float, length: int) -> np.ndarray:
    c = BiquadCoeffs(b, a, kind, cutoff, fs)
    m = filtfilt(c, np.eye(length))
    m.setflags(write=False)
    return m


def filtfilt_operator(c: BiquadCoeffs, length: int) -> np.ndarray:
    """Matrix ``M`` with ``filtfilt(c, x) == M @ x`` for series of ``length`` samples."""
    return _operator(c.b, c.a, c.kind, c.cutoff_hz, c.fs_hz, length)


def downsample(x, factor: int = 2) -> np.ndarray:
    return np.asarray(x)[::factor]


def upsample_linear(x, factor: int = 2) -> np.ndarray:
    """Linear interpolation sampling each output cell at its centre (edges clamped)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (1.0 - w) * x[lo] + w * x[hi]


def resample(traj, factor: int = 2, direction: str = "down"):
    from .systems import Trajectory
    if direction == "down":
        return Trajectory(downsample(traj.values, factor), traj.dt * factor, traj.t0)
    if direction == "up":
        return Trajectory(upsample_linear(traj.values, factor), traj.dt / factor, traj.t0)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
