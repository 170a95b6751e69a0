import numpy as np
import pytest

from kklhybrid import autodiff as ad
from kklhybrid import models, residuum
from kklhybrid.models import ModelSpec, init_params
from kklhybrid.observer import ConfigurationError
from kklhybrid.systems import DataError, Trajectory
from oracles import analytic_grad, numeric_grad, rel_err

SMALL = dict(d_z=4, d_v=4, hidden=6)


def series(n=60, seed=0, d=1):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.1
    data = np.sin(t)[:, None] + 0.1 * rng.normal(size=(n, d))
    sim = 0.8 * np.sin(t)[:, None] * np.ones((1, d))
    return Trajectory(data, 0.1), Trajectory(sim, 0.1)


def small(family, **kw):
    if family == "filter-hybrid":
        kw.setdefault("cutoff", 0.5)
    return ModelSpec(family, **{**SMALL, **kw})


def roll(spec, seed=1, warmup=5, starts=(0, 10, 20), length=30, params=None):
    data, sim = series()
    params = params or init_params(spec, np.random.default_rng(seed), sine_init=(1.0, 1.0, 0.0))
    return models.rollout(spec, params, models.make_batch(data, sim, starts, length), warmup), params


FAMILIES_WITH_WARMUP = [f for f in models.FAMILIES if f not in ("sim-only", "residual")]


@pytest.mark.parametrize("family", FAMILIES_WITH_WARMUP)
def test_warmup_rows_equal_measurements(family):
    out, _ = roll(small(family))
    data, sim = series()
    batch = models.make_batch(data, sim, (0, 10, 20), 30)
    np.testing.assert_array_equal(out.y.data[: 6 * 3], batch.data[: 6 * 3])
    assert out.y.shape == (90, 1) and out.steps == 30


@pytest.mark.parametrize("family", ["kkl-rnn", "scenario-2", "scenario-3"])
def test_output_is_sum_of_components(family):
    out, _ = roll(small(family))
    total = out.y_ovs.data + out.y_nonovs.data
    np.testing.assert_allclose(out.y.data, total, atol=1e-14)
    np.testing.assert_array_equal(out.y.data[18:], total[18:])


def test_kkl_damped_head_and_control():
    out, p = roll(small("kkl-rnn", head="damped", residuum_control=True, tstar="invertible"))
    assert p.damped is not None and p.gru.d_i == 1
    np.testing.assert_array_equal(out.y.data[18:], (out.y_ovs.data + out.y_nonovs.data)[18:])


def test_kkl_reduces_to_observer_when_residuum_silent():
    spec = small("kkl-rnn")
    params = init_params(spec, np.random.default_rng(2))
    params.gru.U_o.data[:] = 0.0
    out, _ = roll(spec, params=params)
    np.testing.assert_array_equal(out.y.data[18:], out.y_ovs.data[18:])
    assert np.all(out.y_nonovs.data[18:] == 0)


def test_residual_with_silent_gru_is_simulator():
    spec = small("residual")
    params = init_params(spec, np.random.default_rng(3))
    params.gru.U_o.data[:] = 0.0
    out, _ = roll(spec, params=params)
    data, sim = series()
    np.testing.assert_array_equal(out.y.data, models.make_batch(data, sim, (0, 10, 20), 30).sim)


def test_filter_hybrid_with_silent_gru_is_lowpassed_sim():
    spec = small("filter-hybrid")
    params = init_params(spec, np.random.default_rng(4))
    params.gru.U_o.data[:] = 0.0
    data, sim = series()
    lp = models.lowpass_sim(sim, 0.5)
    out = models.rollout(spec, params, models.full_batch(data, lp), 5)
    np.testing.assert_allclose(out.y.data[6:], lp.values[6:], atol=1e-14)


def test_hybrid_gru_without_control_weights_is_plain_gru():
    hyb = small("hybrid-gru")
    p = init_params(hyb, np.random.default_rng(5))
    for g in residuum.GATES:
        getattr(p.gru, f"W_in_{g}").data[:] = 0.0
    plain = models.ModelParams(gru=residuum.GruParams(**{k: v for k, v in vars(p.gru).items()}))
    a, _ = roll(hyb, params=p)
    for g in residuum.GATES:
        setattr(plain.gru, f"W_in_{g}", None)
    b, _ = roll(small("plain-gru"), params=plain)
    np.testing.assert_allclose(a.y.data, b.y.data, atol=1e-14)


def test_sim_only_returns_sim():
    out, _ = roll(small("sim-only"))
    data, sim = series()
    np.testing.assert_array_equal(out.y.data, models.make_batch(data, sim, (0, 10, 20), 30).sim)


def test_scenario_one_models_sim():
    out, p = roll(small("scenario-1"))
    assert out.s.shape == out.y.shape and p.h_head is not None


def test_warmup_validation():
    with pytest.raises(DataError):
        roll(small("plain-gru"), warmup=30)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ModelSpec("transformer")
    with pytest.raises(ConfigurationError):
        ModelSpec("filter-hybrid")
    with pytest.raises(ConfigurationError):
        ModelSpec("kkl-rnn", d_z=4, d_u=3, tstar="invertible")
    with pytest.raises(ConfigurationError):
        ModelSpec.from_dict({"family": "kkl-rnn", "depth": 3})
    spec = ModelSpec("kkl-rnn", d_z=8)
    assert spec.d_u == 8
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_make_batch_layout():
    data, sim = series()
    b = models.make_batch(data, sim, (3, 7), 5)
    np.testing.assert_array_equal(b.data[b.rows(2)][:, 0], data.values[[5, 9], 0])
    np.testing.assert_allclose(b.times[b.rows(0)][:, 0], [0.3, 0.7])
    with pytest.raises(DataError):
        models.make_batch(data, sim, (58,), 5)


def test_series_view():
    out, _ = roll(small("kkl-rnn"))
    v = out.series("y")
    assert v.shape == (3, 30, 1)
    np.testing.assert_array_equal(v[1, :, 0], out.y.data[1::3, 0])


# ----------------------------------------------------------- buffering

def test_buffer_sim():
    sim = Trajectory(np.array([1.0, np.nan, np.nan, 4.0]), 1.0, mask=np.array([True, False, False, True]))
    filled = models.buffer_sim(sim, [9.0, 8.0, 7.0, 6.0])
    np.testing.assert_array_equal(filled.values[:, 0], [1.0, 8.0, 7.0, 4.0])
    with pytest.raises(DataError):
        models.buffer_sim(Trajectory(np.array([np.nan, 1.0]), 1.0, mask=np.array([False, True])), [0, 0])


def test_buffered_observer_equals_rollout_on_filled_sim():
    spec = small("kkl-rnn")
    params = init_params(spec, np.random.default_rng(6))
    data, sim = series()
    plain = models.rollout(spec, params, models.full_batch(data, sim), 5)
    filled = sim.values.copy()
    filled[30] = plain.s.data[30]
    reference = models.rollout(spec, params, models.full_batch(data, Trajectory(filled, sim.dt)), 5)
    mask = np.ones(len(sim), dtype=bool)
    mask[30] = False
    values = sim.values.copy()
    values[30] = np.nan
    gapped = models.rollout(spec, params, models.full_batch(data, Trajectory(values, sim.dt, mask=mask)), 5)
    np.testing.assert_allclose(gapped.y.data, reference.y.data, atol=1e-12)
    np.testing.assert_allclose(gapped.sim_target.data[30], plain.s.data[30], atol=1e-12)


def test_buffered_observer_uses_learned_sim():
    spec = small("kkl-rnn")
    params = init_params(spec, np.random.default_rng(7))
    data, sim = series()
    mask = np.ones(len(sim), dtype=bool)
    mask[20:40] = False
    values = sim.values.copy()
    values[20:40] = np.nan
    out = models.rollout(spec, params, models.full_batch(data, Trajectory(values, 0.1, mask=mask)), 5)
    np.testing.assert_array_equal(out.sim_target.data[20:40], out.s.data[20:40])
    assert np.all(np.isfinite(out.y.data))
    mask[0] = False
    with pytest.raises(DataError):
        models.rollout(spec, params, models.full_batch(data, Trajectory(values, 0.1, mask=mask)), 5)


def test_hybrid_gru_rejects_gaps():
    data, sim = series()
    mask = np.ones(len(sim), dtype=bool)
    mask[10] = False
    spec = small("hybrid-gru")
    with pytest.raises(DataError):
        models.rollout(spec, init_params(spec, np.random.default_rng(0)),
                       models.full_batch(data, Trajectory(sim.values, 0.1, mask=mask)), 5)


# ----------------------------------------------------------- substitutes

def test_sine_substitute_values_and_gradient():
    p = models.SineParams.init(1.5, 0.7, 0.2)
    t = np.linspace(0, 10, 25)
    np.testing.assert_allclose(models.sim_substitute_sine(p, t).data[:, 0], 1.5 * np.sin(0.7 * t + 0.2), atol=1e-15)
    w = ad.constant(np.random.default_rng(0).normal(size=(25, 1)))
    fn = lambda: ad.sum_(models.sim_substitute_sine(p, t) * w)
    leaves = p.params()
    for a, n in zip(analytic_grad(fn, leaves), numeric_grad(fn, leaves)):
        assert rel_err(a, n) < 1e-6


def test_sine_substitute_requires_init():
    with pytest.raises(ConfigurationError):
        init_params(small("kkl-rnn", sim_substitute="trainable-sine"), np.random.default_rng(0))


def test_lowpass_substitute_length_and_smoothness():
    n = 301
    t = np.arange(n) * 0.1
    data = Trajectory((np.sin(0.3 * t) + 0.3 * np.random.default_rng(0).normal(size=n))[:, None], 0.1)
    cfg = {"hidden": 4, "steps": 3, "lr": 1e-3, "subtraj_length": 40, "warmup": 5, "batch_size": 4,
           "cutoff": 0.1, "fs": 10.0}
    sub = models.pretrain_lowpass_substitute(data, 200, cfg, seed=0)
    assert len(sub) == n and sub.dt == data.dt
    assert np.all(np.isfinite(sub.values))
    # piecewise-linear upsampling of a 2x coarser series: second differences vanish on every other sample
    assert np.abs(np.diff(sub.values[:, 0])).max() < np.abs(np.diff(data.values[:, 0])).max()
