import numpy as np
import pytest

from kklhybrid import autodiff as ad
from kklhybrid import observer as obs
from kklhybrid.observer import ConfigurationError, KklParams, UnsupportedOperation


def kkl(variant="mlp", d_z=4, d_u=None, seed=0):
    rng = np.random.default_rng(seed)
    return KklParams.init(rng, d_z, d_z if d_u is None else d_u, 1, 1, hidden=8, variant=variant)


def set_eigs(p, lam):
    p.eigen_raw.data = np.log(np.asarray(lam) / (1 - np.asarray(lam))).reshape(1, -1)


def zero_coupling(p):
    for v in p.tstar.params():
        v.data[:] = 0.0


def test_eigenvalues_in_unit_interval_and_F_fixed():
    p = kkl(d_z=16)
    lam = p.eigenvalues()
    assert np.all((lam > 0) & (lam < 1))
    assert p.F.shape == (16, 1) and np.all(p.F == 1.0)
    assert all(v is not p.F for v in p.params())
    assert not isinstance(p.F, ad.Value)


def test_tiny_eigenvalue_kills_memory():
    p = kkl()
    set_eigs(p, [1e-9] * 4)
    sim = np.random.default_rng(1).normal(size=(30, 1))
    z = obs.z_rollout(p, sim).data
    assert np.abs(z[1:] - sim[:-1] @ p.F.T).max() < 1e-8


def test_geometric_decay_without_input():
    p = kkl()
    set_eigs(p, [0.5] * 4)
    z = obs.z_rollout(p, np.zeros((20, 1)), z0=np.ones((1, 4))).data
    np.testing.assert_allclose(z[:, 0], 0.5 ** np.arange(20), rtol=1e-14)


def test_forgetting_is_exact_for_diagonal_D():
    p = kkl(d_z=6)
    rng = np.random.default_rng(2)
    sim = rng.normal(size=(40, 1))
    z0a, z0b = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    za = obs.z_rollout(p, sim, z0=z0a).data
    zb = obs.z_rollout(p, sim, z0=z0b).data
    lam = p.eigenvalues()
    expected = np.abs((z0a - z0b) * lam ** np.arange(40)[:, None])
    np.testing.assert_allclose(np.abs(za - zb), expected, atol=1e-12)
    gap = np.abs(za - zb).max(axis=1)
    assert np.all(gap <= lam.max() ** np.arange(40) * np.abs(z0a - z0b).max() + 1e-10)


def test_mlp_with_zero_weights_outputs_bias():
    p = kkl()
    for layer in p.tstar.layers:
        layer.weight.data[:] = 0.0
    u = obs.tstar(p, np.random.default_rng(0).normal(size=(5, 4))).data
    np.testing.assert_array_equal(u, np.repeat(p.tstar.layers[-1].bias.data, 5, axis=0))


def test_zero_coupling_is_identity():
    p = kkl("invertible")
    zero_coupling(p)
    z = np.random.default_rng(0).normal(size=(7, 4))
    np.testing.assert_array_equal(obs.tstar(p, z).data, z)
    np.testing.assert_array_equal(obs.tstar_inverse(p, z).data, z)


def test_coupling_round_trip():
    rng = np.random.default_rng(5)
    for d in (2, 3, 8):
        p = KklParams.init(rng, d, d, 1, 1, hidden=16, variant="invertible")
        z = rng.uniform(-3, 3, size=(100, d))
        u = obs.tstar(p, z)
        assert np.abs(obs.tstar_inverse(p, u).data - z).max() < 1e-9


def test_invertible_requires_square():
    with pytest.raises(ConfigurationError):
        KklParams.init(np.random.default_rng(0), 4, 3, 1, 1, variant="invertible")


def test_mlp_has_no_inverse():
    p = kkl("mlp")
    with pytest.raises(UnsupportedOperation):
        obs.tstar_inverse(p, np.zeros((1, 4)))
    with pytest.raises(UnsupportedOperation):
        obs.fu_step(p, np.zeros((1, 4)), np.zeros((1, 1)))


def test_fu_step_identity_coupling():
    p = kkl("invertible")
    zero_coupling(p)
    set_eigs(p, [0.5] * 4)
    u = np.random.default_rng(0).normal(size=(1, 4))
    np.testing.assert_allclose(obs.fu_step(p, u, np.zeros((1, 1))).data, 0.5 * u, atol=1e-15)


def test_fu_step_consistent_with_rollout():
    p = kkl("invertible", seed=3)
    rng = np.random.default_rng(4)
    sim = rng.normal(size=(15, 1))
    z0 = rng.normal(size=(1, 4))
    u_roll = obs.tstar(p, obs.z_rollout(p, sim, z0=z0)).data
    u = obs.tstar(p, z0)
    for n in range(14):
        u = obs.fu_step(p, u, sim[n:n + 1])
        assert np.abs(u.data - u_roll[n + 1]).max() < 1e-8


def test_heads():
    p = kkl()
    for head in (p.h_head, p.g_head):
        head.weight.data[:] = 0.0
    u = np.random.default_rng(0).normal(size=(3, 4))
    s, y = obs.heads(p, u)
    np.testing.assert_array_equal(s.data, np.repeat(p.h_head.bias.data, 3, axis=0))
    p = KklParams.init(np.random.default_rng(0), 3, 3, 3, 1, hidden=4)
    p.h_head.weight.data = np.eye(3)
    p.h_head.bias.data[:] = 0.0
    s, _ = obs.heads(p, u[:, :3])
    np.testing.assert_array_equal(s.data, u[:, :3])
    s1, y1 = obs.heads(p, 2.5 * u[:, :3])
    s0, y0 = obs.heads(p, u[:, :3])
    b = p.g_head.bias.data
    np.testing.assert_allclose(y1.data - b, 2.5 * (y0.data - b), atol=1e-12)


def test_controllability_with_distinct_eigenvalues():
    p = kkl(d_z=6)
    assert obs.eigenvalue_collisions(p) == []
    C = obs.controllability_matrix(p.eigenvalues(), p.F)
    assert np.linalg.matrix_rank(C) == 6
    set_eigs(p, [0.3, 0.3, 0.5, 0.6, 0.7, 0.8])
    assert obs.eigenvalue_collisions(p) == [(0, 1)]


def test_observer_gradient_matches_finite_differences():
    from oracles import analytic_grad, numeric_grad, rel_err
    p = kkl("invertible", seed=8)
    sim = ad.constant(np.random.default_rng(9).normal(size=(10 * 2, 1)))
    target = ad.constant(np.random.default_rng(10).normal(size=(20, 1)))
    fn = lambda: ad.mse(obs.heads(p, obs.tstar(p, obs.z_rollout(p, sim, batch=2)))[1], target)
    leaves = p.params()
    for a, n in zip(analytic_grad(fn, leaves), numeric_grad(fn, leaves)):
        assert rel_err(a, n) < 1e-4
