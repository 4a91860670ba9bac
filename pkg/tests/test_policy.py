import math

import numpy as np
import pytest

from gaitforge import policy as P


@pytest.fixture()
def params():
    return P.init_params(10, 4, seed=2)


def zero_params(obs_dim=10, act_dim=4):
    p = P.init_params(obs_dim, act_dim, seed=0)
    for a in P.trainable_arrays(p):
        a[...] = 0.0
    return p


# -- forward passes -------------------------------------------------------------


def test_zero_weights_zero_mean():
    p = zero_params()
    rng = np.random.default_rng(0)
    for _ in range(5):
        obs = rng.normal(size=10)
        assert np.all(P.mean_action(p, obs) == 0.0)
        assert P.value(p, obs) == 0.0


def naive_forward(layers, x):
    # deliberately different style from the library path: per-sample loops
    h = list(x)
    for li, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[1]):
            s = b[j]
            for i in range(W.shape[0]):
                s += h[i] * W[i, j]
            out.append(s if li == len(layers) - 1 else math.tanh(s))
        h = out
    return np.array(h)


def test_forward_matches_independent_reimplementation(params):
    rng = np.random.default_rng(1)
    for _ in range(5):
        obs = rng.normal(size=10)
        z = P.normalize_obs(params, obs)
        got = P.mean_action(params, obs)
        want = naive_forward(params.pi.layers, z)
        np.testing.assert_allclose(got, want, atol=1e-12)
        got_v = P.value(params, obs)
        want_v = naive_forward(params.vf.layers, z)[0]
        assert abs(got_v - want_v) < 1e-12


def test_batched_forward_matches_single(params):
    rng = np.random.default_rng(2)
    O = rng.normal(size=(7, 10))
    batch = P.mean_action(params, O)
    for i in range(7):
        np.testing.assert_allclose(batch[i], P.mean_action(params, O[i]),
                                   atol=1e-14)
    vb = P.value(params, O)
    for i in range(7):
        assert abs(vb[i] - P.value(params, O[i])) < 1e-14


def test_value_finite_for_extreme_obs(params):
    obs = np.full(10, 1e3)
    assert math.isfinite(P.value(params, obs))
    assert math.isfinite(P.value(params, -obs))


def test_forward_shape_mismatch(params):
    with pytest.raises(P.ShapeMismatch):
        P.mean_action(params, np.zeros(11))


# -- sampling --------------------------------------------------------------------


def test_sample_at_log_std_floor_is_near_mean(params):
    params.log_std[:] = P.LOG_STD_MIN
    rng = np.random.default_rng(3)
    obs = rng.normal(size=10)
    mu = P.mean_action(params, obs)
    for _ in range(100):
        a, _ = P.sample_action(params, obs, rng)
        assert np.abs(a - mu).max() < 0.05


def test_log_prob_at_mean(params):
    obs = np.zeros(10)
    mu = P.mean_action(params, obs)
    lp = P.gaussian_log_prob(mu, params.log_std, mu)
    want = -0.5 * (2.0 * params.log_std.sum() + 4 * math.log(2 * math.pi))
    assert lp == pytest.approx(want, abs=1e-12)


def test_sample_mc_mean(params):
    rng = np.random.default_rng(4)
    obs = rng.normal(size=10)
    mu = P.mean_action(params, obs)
    n = 100000
    samples = mu + np.exp(params.log_std) * rng.standard_normal((n, 4))
    err = np.abs(samples.mean(axis=0) - mu)
    bound = 3.0 * np.exp(params.log_std) / math.sqrt(n)
    assert np.all(err < bound)


def test_sampling_deterministic_given_seed(params):
    obs = np.ones(10)
    a1, lp1 = P.sample_action(params, obs, np.random.default_rng(9))
    a2, lp2 = P.sample_action(params, obs, np.random.default_rng(9))
    assert np.array_equal(a1, a2) and lp1 == lp2


def test_gaussian_grads_at_mean(params):
    obs = np.zeros(10)
    mu = P.mean_action(params, obs)
    dmu, dls = P.gaussian_log_prob_grads(mu, params.log_std, mu)
    assert np.all(dmu == 0.0)
    np.testing.assert_allclose(dls, -1.0, atol=1e-15)


def test_gaussian_grads_match_fd(params):
    rng = np.random.default_rng(5)
    mu = rng.normal(size=4)
    a = mu + rng.normal(size=4) * 0.3
    ls = params.log_std.copy()
    dmu, dls = P.gaussian_log_prob_grads(mu, ls, a)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = (P.gaussian_log_prob(mu + e, ls, a)
              - P.gaussian_log_prob(mu - e, ls, a)) / (2 * h)
        assert abs(fd - dmu[k]) < 1e-6 * max(1.0, abs(fd))
        fd = (P.gaussian_log_prob(mu, ls + e, a)
              - P.gaussian_log_prob(mu, ls - e, a)) / (2 * h)
        assert abs(fd - dls[k]) < 1e-6 * max(1.0, abs(fd))


# -- backprop ---------------------------------------------------------------------


def scalar_loss_and_grads(params, O, U, w):
    """L = sum(U * pi(O)) + sum(w * v(O)) with fixed coefficient tensors."""
    Z = P.normalize_obs(params, O)
    out_pi, cache_pi = P.mlp_forward(params.pi, Z)
    out_v, cache_v = P.mlp_forward(params.vf, Z)
    L = float((U * out_pi).sum() + (w * out_v).sum())
    g_pi, _ = P.mlp_backward(params.pi, cache_pi, U)
    g_v, _ = P.mlp_backward(params.vf, cache_v, w)
    flat = []
    for gW, gb in g_pi:
        flat.extend([gW.ravel(), gb.ravel()])
    flat.append(np.zeros_like(params.log_std))
    for gW, gb in g_v:
        flat.extend([gW.ravel(), gb.ravel()])
    return L, np.concatenate(flat)


def test_backward_matches_finite_difference_every_parameter(params):
    rng = np.random.default_rng(6)
    O = rng.normal(size=(8, 10))
    U = rng.normal(size=(8, 4))
    w = rng.normal(size=(8, 1))
    _, grad = scalar_loss_and_grads(params, O, U, w)
    theta0 = P.flatten(params)
    h = 1e-5
    work = params.copy()
    fd = np.empty_like(theta0)
    for i in range(theta0.size):
        t = theta0.copy()
        t[i] = theta0[i] + h
        P.unflatten_into(work, t)
        Lp, _ = scalar_loss_and_grads(work, O, U, w)
        t[i] = theta0[i] - h
        P.unflatten_into(work, t)
        Lm, _ = scalar_loss_and_grads(work, O, U, w)
        fd[i] = (Lp - Lm) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-3)
    rel = np.abs(fd - grad) / denom
    assert rel.max() < 1e-4


def test_zero_upstream_zero_gradient(params):
    O = np.random.default_rng(7).normal(size=(5, 10))
    _, cache = P.mlp_forward(params.pi, O)
    grads, dx = P.mlp_backward(params.pi, cache, np.zeros((5, 4)))
    for gW, gb in grads:
        assert np.all(gW == 0.0) and np.all(gb == 0.0)
    assert np.all(dx == 0.0)


def test_backward_shape_mismatch(params):
    O = np.zeros((5, 10))
    _, cache = P.mlp_forward(params.pi, O)
    with pytest.raises(P.ShapeMismatch):
        P.mlp_backward(params.pi, cache, np.zeros((5, 3)))


# -- init, clamp, flatten ----------------------------------------------------------


def test_orthogonal_init_rows_orthonormal(params):
    W1 = params.pi.layers[0][0]    # 10 x 64, wide: rows orthonormal
    np.testing.assert_allclose(W1 @ W1.T, np.eye(10), atol=1e-12)
    Wout = params.pi.layers[-1][0]  # 64 x 4, tall: columns orthonormal
    np.testing.assert_allclose(Wout.T @ Wout, np.eye(4), atol=1e-12)
    Wv = params.vf.layers[-1][0]
    np.testing.assert_allclose(Wv.T @ Wv, np.eye(1), atol=1e-12)


def test_init_deterministic():
    a = P.flatten(P.init_params(10, 4, seed=11))
    b = P.flatten(P.init_params(10, 4, seed=11))
    c = P.flatten(P.init_params(10, 4, seed=12))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_log_std_init_and_clamp(params):
    assert np.all(params.log_std == -0.7)
    params.log_std[0] = -9.0
    params.log_std[1] = 7.0
    P.clamp_log_std(params)
    assert params.log_std[0] == P.LOG_STD_MIN
    assert params.log_std[1] == P.LOG_STD_MAX


def test_flatten_unflatten_round_trip(params):
    v = P.flatten(params)
    work = P.init_params(10, 4, seed=99)
    P.unflatten_into(work, v)
    assert np.array_equal(P.flatten(work), v)
    with pytest.raises(P.ShapeMismatch):
        P.unflatten_into(work, v[:-1])


# -- running stats ------------------------------------------------------------------


def test_running_stat_matches_batch_moments():
    rng = np.random.default_rng(8)
    rs = P.RunningStat(6)
    chunks = [rng.normal(loc=i, size=(n, 6)) for i, n in enumerate((3, 50, 17, 200))]
    for c in chunks:
        rs.update(c)
    allx = np.vstack(chunks)
    np.testing.assert_allclose(rs.mean, allx.mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(rs.var, allx.var(axis=0), atol=1e-10)
    assert rs.count == allx.shape[0]


def test_running_stat_freeze_round_trip(params):
    rs = P.RunningStat(10)
    rs.update(np.random.default_rng(9).normal(size=(40, 10)))
    rs.freeze_into(params)
    rs2 = P.RunningStat.from_params(params)
    assert np.array_equal(rs2.mean, rs.mean)
    assert np.array_equal(rs2.var, rs.var)
    assert rs2.count == rs.count


# -- checkpoint ----------------------------------------------------------------------


def test_checkpoint_bit_exact_round_trip(tmp_path, params):
    rs = P.RunningStat(10)
    rs.update(np.random.default_rng(10).normal(size=(25, 10)))
    rs.freeze_into(params)
    path = str(tmp_path / "p.ckpt")
    P.save_params(params, path)
    loaded = P.load_params(path)
    assert np.array_equal(P.flatten(loaded), P.flatten(params))
    assert np.array_equal(loaded.obs_mean, params.obs_mean)
    assert np.array_equal(loaded.obs_var, params.obs_var)
    assert loaded.obs_count == params.obs_count
    obs = np.random.default_rng(11).normal(size=10)
    assert np.array_equal(P.mean_action(loaded, obs), P.mean_action(params, obs))
    assert P.value(loaded, obs) == P.value(params, obs)


def test_checkpoint_magic_guard(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOTCK" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        P.load_params(path)
