import math

import numpy as np
import pytest

from kklhybrid import systems
from kklhybrid.systems import DataError, Trajectory


def test_damped_formulas():
    assert systems.damped_signal(np.array([0.0]))[0] == 0.0
    expected = math.sin(1.0) + 2 * math.exp(-0.1) * math.sin(10.0)
    assert systems.damped_signal(np.array([10.0]))[0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(-0.14308, abs=1e-4)
    assert systems.damped_simulator(np.array([10.0]))[0] == pytest.approx(0.58903, abs=1e-5)


def test_gen_damped_layout_and_identity():
    sd = systems.generate(systems.default_spec("i", noise_var=0.0))
    assert len(sd.data) == len(sd.sim) == 1500 and sd.data.dt == sd.sim.dt == 0.1
    t = sd.data.times
    np.testing.assert_array_equal(sd.truth.values[:, 0], sd.sim.values[:, 0] / 0.7 * 0 + np.sin(0.1 * t)
                                  + 2 * np.exp(-0.01 * t) * np.sin(t))
    np.testing.assert_array_equal(sd.data.values, sd.truth.values)


def test_gen_damped_noise_level():
    sd = systems.generate(systems.default_spec("i", seed=5))
    resid = sd.data.values - sd.truth.values
    assert 0.08 < resid.var() < 0.12


def test_torsion_transient():
    assert systems.torsion_transient(np.array([0.0]))[0] == 0.0
    expected = math.exp(-1.0) * math.sin(100.0)
    assert systems.torsion_transient(np.array([2.0]))[0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(-0.18634, abs=1e-4)


@pytest.mark.parametrize("sid", ["ii", "v"])
def test_torsion_standin_contains_transient(sid):
    sd = systems.generate(systems.default_spec(sid, noise_var=0.0))
    n = np.arange(len(sd.data))
    base = sd.truth.values[:, 0] - systems.torsion_transient(n.astype(float))
    # the transient is gone after a few dozen samples, so truth equals the base there
    assert np.all(np.isfinite(base))
    assert np.abs(systems.torsion_transient(n[60:].astype(float))).max() < 1e-12
    assert len(sd.sim) == len(sd.data)


def test_standin_from_csv(tmp_path):
    path = tmp_path / "pend.csv"
    n = np.arange(200.0)
    systems.write_csv(path, {"t": n, "y": np.sin(0.1 * n), "sim": 0.9 * np.sin(0.1 * n)})
    sd = systems.gen_torsion_standin(systems.default_spec("ii", horizon=200, train_length=100, noise_var=0.0),
                                     csv_path=path)
    np.testing.assert_allclose(sd.data.values[:, 0], np.sin(0.1 * n) + systems.torsion_transient(n), atol=1e-12)
    np.testing.assert_allclose(sd.sim.values[:, 0], 0.9 * np.sin(0.1 * n), atol=1e-12)


def test_generators_are_pure():
    for sid in systems.SYSTEM_IDS:
        spec = systems.default_spec(sid, seed=3)
        a, b = systems.generate(spec), systems.generate(spec)
        np.testing.assert_array_equal(a.data.values, b.data.values)
        np.testing.assert_array_equal(a.sim.values, b.sim.values)


# ------------------------------------------------------------------ VdP / RK4

def test_rk4_harmonic_oscillator():
    rhs = lambda s: systems.vdp_rhs(s, 0.0, 0.0, 7.0)
    times, states = systems.rk4_integrate(rhs, (1.0, 0.0, 0.0, 0.0), math.pi, math.pi / 10000, 10000)
    assert abs(states[-1, 0] + 1.0) < 1e-6


def _linear_block_error(h):
    u0, v0, w = 0.31, 1.0, 7.0
    every = int(round(0.1 / h))
    times, states = systems.rk4_integrate(lambda s: systems.vdp_rhs(s, 5.0, 80.0, w), (-2.0, 1.0, u0, v0),
                                          100.0, h, every)
    exact = u0 * np.cos(w * times) + v0 / w * np.sin(w * times)
    return np.abs(states[:, 2] - exact).max()


def test_rk4_linear_forcing_block_closed_form():
    # fourth-order convergence; the 1e-8 band is reached at h = 1e-3 over t in [0, 100]
    coarse, fine = _linear_block_error(0.01), _linear_block_error(0.001)
    assert fine < 1e-8
    assert 0.5e4 < coarse / fine < 2e4


def test_rk4_zero_state_stays_zero():
    times, states = systems.rk4_integrate(lambda s: systems.vdp_rhs(s, 0.0, 0.0, 7.0), (0, 0, 0, 0), 5.0, 0.01, 10)
    assert np.all(states == 0.0)


def test_rk4_blowup_reports_time():
    with pytest.raises(systems.IntegrationError) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            systems.rk4_integrate(lambda s: s * s * 1e3, (1.0,), 10.0, 0.1, 1)
    assert info.value.time > 0


def test_gen_vdp_shape_and_sine_init():
    sd = systems.generate(systems.default_spec("iv"))
    assert len(sd.data) == 951
    assert sd.data.t0 == pytest.approx(5.0)
    amp, freq, phase = sd.extras["sine_init"]
    assert amp > 0.5 and 0.1 < freq < 7.0
    np.testing.assert_allclose(sd.sim.values[:, 0], amp * np.sin(freq * sd.sim.times + phase), atol=1e-12)


def test_fit_sine_recovers_parameters():
    t = np.arange(500) * 0.1
    amp, freq, phase = systems.fit_sine(1.7 * np.sin(0.83 * t + 0.4), t)
    assert amp == pytest.approx(1.7, rel=1e-3)
    assert freq == pytest.approx(0.83, rel=1e-3)
    assert phase == pytest.approx(0.4, abs=1e-2)


# ----------------------------------------------------------------- noise

def test_noise():
    base = Trajectory(np.zeros(100000), 1.0)
    assert systems.add_noise(base, 0.0, 1) is base
    noisy = systems.add_noise(base, 0.1, 1)
    assert 0.095 <= noisy.values.var() <= 0.105
    np.testing.assert_array_equal(noisy.values, systems.add_noise(base, 0.1, 1).values)
    with pytest.raises(DataError):
        systems.add_noise(base, -1.0, 1)


# ---------------------------------------------------------------- CSV

def test_ingest_three_rows(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,y\n0,1\n0.1,2\n0.2,3\n")
    traj = systems.ingest_csv(p, ["y"])
    assert len(traj) == 3 and traj.dt == pytest.approx(0.1)
    assert traj.available.all()


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("t,y\n", "no data"),
    ("t,y\n0,1\n0.1\n", "row 3"),
    ("t,y\n0,1\n0.1,abc\n", "row 3"),
    ("t,z\n0,1\n", "missing column"),
    ("t,y\n0,1\n1,2\n5,3\n", "uniform"),
])
def test_ingest_errors(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        systems.ingest_csv(p, ["y"])


def test_ingest_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        systems.ingest_csv(tmp_path / "nope.csv", ["y"])


# ---------------------------------------------------------------- gaps

def test_drop_sim_window():
    sim = Trajectory(np.arange(4000.0), 1.0)
    assert systems.drop_sim_window(sim, 2500, 0, 2000) is sim
    gapped = systems.drop_sim_window(sim, 2000, 500, 2000)
    assert (~gapped.mask).sum() == 500
    np.testing.assert_array_equal(gapped.values, sim.values)
    with pytest.raises(DataError):
        systems.drop_sim_window(sim, 3800, 500, 2000)
    with pytest.raises(DataError, match="overlaps"):
        systems.drop_sim_window(sim, 1900, 500, 2000)


def test_trajectory_invariants():
    with pytest.raises(DataError):
        Trajectory(np.array([1.0, np.nan]), 1.0)
    with pytest.raises(DataError):
        Trajectory(np.ones(3), 1.0, mask=np.ones(2, dtype=bool))
    masked = Trajectory(np.array([1.0, np.nan]), 1.0, mask=np.array([True, False]))
    assert len(masked) == 2


def test_spec_validation():
    with pytest.raises(DataError):
        systems.default_spec("vi")
    with pytest.raises(DataError):
        systems.default_spec("i", warmup=700)
