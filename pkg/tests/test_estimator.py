import numpy as np
import pytest
from sklearn.base import clone

from kklhybrid.estimator import HybridSequenceRegressor
from kklhybrid.systems import DataError


def xy(n=200):
    t = np.arange(n) * 0.1
    return (0.8 * np.sin(t))[:, None], np.sin(t) + 0.3 * np.exp(-0.02 * t) * np.sin(3 * t)


def small(**kw):
    return HybridSequenceRegressor(**{**dict(d_z=4, d_v=4, hidden=6, train_steps=3, subtraj_length=40,
                                             batch_size=4, warmup=5, dt=0.1), **kw})


def test_params_round_trip():
    est = small(family="residual")
    assert est.get_params()["family"] == "residual"
    est.set_params(d_v=7)
    assert clone(est).d_v == 7


@pytest.mark.parametrize("family", ["kkl-rnn", "plain-gru", "hybrid-gru", "residual"])
def test_fit_predict_shapes(family):
    X, y = xy()
    est = small(family=family).fit(X, y)
    pred = est.predict(X)
    assert pred.shape == (200,)
    if family != "residual":  # the residual family outputs r + s on every row
        np.testing.assert_array_equal(pred[:6], y[:6])
    assert np.isfinite(est.score(X, y))
    assert est.transform(X).shape[0] == 200


def test_fit_is_reproducible():
    X, y = xy()
    a = small().fit(X, y).predict(X)
    b = small().fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_validation():
    X, y = xy()
    with pytest.raises(ValueError):
        small().fit(X, y[:50])
    with pytest.raises(ValueError):
        small().fit(np.full_like(X, np.nan), y)
    est = small().fit(X, y)
    with pytest.raises(DataError):
        est.predict(np.hstack([X, X]))
    with pytest.raises(DataError):
        small(subtraj_length=500).fit(X, y)


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        small().predict(xy()[0])
