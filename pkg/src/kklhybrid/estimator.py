"""scikit-learn style wrapper around the model families."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from . import evaluation, models, training
from .models import ModelSpec
from .systems import DataError, Trajectory


class HybridSequenceRegressor(BaseEstimator):
    """Sequence regressor mapping a simulator trajectory ``X`` to measurements ``y``.

    Rows of ``X`` and ``y`` are consecutive time steps. Fitting draws random
    training windows from the given sequence; prediction rolls the model
    over the whole of ``X``, seeded with the first ``warmup + 1`` measured
    samples.
    """

    def __init__(self, family="kkl-rnn", d_z=32, d_v=32, hidden=100, head="linear", reg_weight=0.0,
                 cutoff=None, train_steps=300, lr=1e-3, subtraj_length=100, batch_size=50, warmup=50,
                 dt=1.0, random_state=0):
        self.family = family
        self.d_z = d_z
        self.d_v = d_v
        self.hidden = hidden
        self.head = head
        self.reg_weight = reg_weight
        self.cutoff = cutoff
        self.train_steps = train_steps
        self.lr = lr
        self.subtraj_length = subtraj_length
        self.batch_size = batch_size
        self.warmup = warmup
        self.dt = dt
        self.random_state = random_state

    def _spec(self, d_s: int, d_y: int) -> ModelSpec:
        return ModelSpec(self.family, d_y=d_y, d_s=d_s, d_z=self.d_z, d_v=self.d_v, hidden=self.hidden,
                         head=self.head, reg_weight=self.reg_weight, cutoff=self.cutoff)

    def _sim(self, X) -> Trajectory:
        sim = Trajectory(X, self.dt)
        if self.family == "filter-hybrid":
            sim = models.lowpass_sim(sim, self.cutoff, 1.0 / self.dt)
        return sim

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        y = y.reshape(len(y), -1)
        check_consistent_length(X, y)
        if self.subtraj_length > len(X):
            raise DataError(f"subtraj_length {self.subtraj_length} exceeds sequence length {len(X)}")
        spec = self._spec(X.shape[1], y.shape[1])
        params = models.init_params(spec, np.random.default_rng(self.random_state))
        data, sim = Trajectory(y, self.dt), self._sim(X)
        self.history_, _ = training.fit(spec, params, data, sim, steps=self.train_steps, lr=self.lr,
                                        subtraj_length=self.subtraj_length, batch_size=self.batch_size,
                                        warmup=self.warmup, seed=self.random_state, train_length=len(X),
                                        reg_weight=self.reg_weight)
        self.spec_, self.params_ = spec, params
        self.n_features_in_ = X.shape[1]
        self.warmup_y_ = y[: self.warmup + 1].copy()
        return self

    def _rollout(self, X, y_warmup):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        head = self.warmup_y_ if y_warmup is None else check_array(y_warmup, dtype=np.float64, ensure_2d=False)
        head = head.reshape(len(head), -1)
        if len(head) < self.warmup + 1 or len(X) <= self.warmup + 1:
            raise DataError(f"need at least warmup + 1 = {self.warmup + 1} measured samples and a longer X")
        data = np.zeros((len(X), head.shape[1]))
        data[: self.warmup + 1] = head[: self.warmup + 1]
        return evaluation.predict(self.spec_, self.params_, Trajectory(data, self.dt), self._sim(X), self.warmup)

    def predict(self, X, y_warmup=None) -> np.ndarray:
        """Full-horizon prediction over every row of ``X``."""
        out = self._rollout(X, y_warmup).y.data
        return out[:, 0] if out.shape[1] == 1 else out

    def transform(self, X, y_warmup=None) -> np.ndarray:
        """Observer latent trajectory ``u`` (KKL-based families) or the recurrent states."""
        out = self._rollout(X, y_warmup)
        if out.u is not None:
            return out.u.data
        return np.vstack([v.data for v in out.v])

    def score(self, X, y) -> float:
        """Negative full-horizon RMSE."""
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        pred = self.predict(X, y)
        return -evaluation.rmse(pred, y)
