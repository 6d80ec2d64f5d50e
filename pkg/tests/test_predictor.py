import io

import numpy as np
import pytest

from tdac import layers as nn
from tdac.fields import EvolutionConfig
from tdac.losses import total_loss
from tdac.evolution import ParameterMaps, evolve
from tdac.predictor import (
    LAMBDA_FLOOR,
    Architecture,
    PredictorError,
    StaleCacheError,
    _unit_specs,
    init_params,
    load_checkpoint,
    predictor_backward,
    predictor_forward,
    save_checkpoint,
)
from tdac.train import sample_gradients

MICRO = Architecture(scale=16, n_bridge=1)


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    s = b[oi]
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                s += w[oi, ci, u, v] * xp[ni, ci, i + u, j + v]
                    out[ni, oi, i, j] = s
    return out


def rel_err(a, n, scale):
    return abs(a - n) / max(abs(a), abs(n), scale)


# --- layers ---


def test_conv_matches_naive_on_ramp():
    x = np.arange(25.0).reshape(1, 1, 5, 5) / 24.0
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
    y, _ = nn.conv_forward(x, w, b)
    np.testing.assert_allclose(y, naive_conv(x, w, b), rtol=0, atol=1e-12)


def test_conv_multichannel_and_pointwise():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    for k in (1, 3):
        w, b = rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
        np.testing.assert_allclose(nn.conv_forward(x, w, b)[0], naive_conv(x, w, b), atol=1e-12)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_backward_is_adjoint(k):
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    y, ctx = nn.conv_forward(x, w, b)
    dy = rng.normal(size=y.shape)
    dx, dw, db = nn.conv_backward(dy, ctx)
    # <dy, J x> = <J^T dy, x> for the linear part; weight gradient by the same identity
    assert np.isclose(np.sum(dy * (y - b[None, :, None, None])), np.sum(dx * x), rtol=1e-12)
    assert np.isclose(np.sum(dy * (y - b[None, :, None, None])), np.sum(dw * w), rtol=1e-12)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)))


def test_maxpool_tie_routes_to_first():
    x = np.array([[[[2.0, 2.0], [2.0, 1.0]]]])
    y, ctx = nn.maxpool_forward(x)
    assert y[0, 0, 0, 0] == 2.0
    g = nn.maxpool_backward(np.ones_like(y), ctx)
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])
    x = np.array([[[[0.0, 1.0], [3.0, 3.0]]]])
    g = nn.maxpool_backward(np.ones((1, 1, 1, 1)), nn.maxpool_forward(x)[1])
    np.testing.assert_array_equal(g[0, 0], [[0.0, 0.0], [1.0, 0.0]])


def test_upsample_formula_and_adjoint():
    u = nn.upsample_matrix(3)
    np.testing.assert_allclose(u @ np.array([0.0, 4.0, 8.0]), [0.0, 1.0, 3.0, 5.0, 7.0, 8.0])
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 3, 4))
    y, ctx = nn.upsample_forward(x)
    dy = rng.normal(size=y.shape)
    assert np.isclose(np.sum(dy * y), np.sum(nn.upsample_backward(dy, ctx) * x), rtol=1e-12)


def test_batchnorm_train_statistics_and_running_update():
    rng = np.random.default_rng(4)
    x = rng.normal(2.0, 3.0, size=(2, 3, 4, 4))
    mean, var = np.zeros(3), np.ones(3)
    y, _ = nn.bn_forward(x, np.ones(3), np.zeros(3), mean, var, True)
    direct = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + nn.BN_EPS)
    np.testing.assert_allclose(y, direct, atol=1e-12)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_tiny_two_conv_network_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 8, 8))
    p = {"w1": rng.normal(size=(3, 2, 3, 3)) * 0.5, "b1": rng.normal(size=3) * 0.1,
         "g": rng.uniform(0.5, 1.5, 3), "be": rng.normal(size=3) * 0.1,
         "w2": rng.normal(size=(1, 3, 3, 3)) * 0.5, "b2": rng.normal(size=1) * 0.1}
    c = rng.normal(size=(2, 1, 8, 8))

    def forward(p):
        y1, c1 = nn.conv_forward(x, p["w1"], p["b1"])
        r, cr = nn.relu_forward(y1)
        n, cb = nn.bn_forward(r, p["g"], p["be"], np.zeros(3), np.ones(3), True)
        y2, c2 = nn.conv_forward(n, p["w2"], p["b2"])
        return float(np.sum(c * y2)), (c1, cr, cb, c2)

    _, (c1, cr, cb, c2) = forward(p)
    dn, dw2, db2 = nn.conv_backward(c, c2)
    dr, dg, dbe = nn.bn_backward(dn, cb)
    _, dw1, db1 = nn.conv_backward(nn.relu_backward(dr, cr), c1)
    grads = {"w1": dw1, "b1": db1, "g": dg, "be": dbe, "w2": dw2, "b2": db2}
    worst, h = 0.0, 1e-6
    for name, g in grads.items():
        scale = 1e-6 * np.abs(g).max() + 1e-12
        for idx in np.ndindex(*g.shape):
            q = {k: v.copy() for k, v in p.items()}
            q[name][idx] += h
            up = forward(q)[0]
            q[name][idx] -= 2 * h
            down = forward(q)[0]
            worst = max(worst, rel_err(g[idx], (up - down) / (2 * h), scale))
    assert worst < 1e-3


# --- predictor ---


def test_zero_weights_give_neutral_outputs():
    params = init_params(Architecture(scale=8), seed=0)
    for k in params.tensors:
        if not k.endswith("bn.gamma"):
            params.tensors[k][...] = 0.0
    out, _ = predictor_forward(np.random.default_rng(0).random((16, 16, 3)), params)
    assert np.all(out.phi0 == 0.0) and np.all(out.P == 0.5)
    np.testing.assert_allclose(out.lambda1, np.log(2.0) + LAMBDA_FLOOR, rtol=1e-15)
    np.testing.assert_allclose(out.lambda2, np.log(2.0) + LAMBDA_FLOOR, rtol=1e-15)


@pytest.mark.parametrize("size", [64, 512])
def test_output_shape_matches_input(size):
    params = init_params(Architecture(scale=16, n_bridge=1), seed=0)
    out, _ = predictor_forward(np.zeros((size, size, 3)), params, mode="eval")
    for a in (out.lambda1_raw, out.lambda2_raw, out.phi0, out.P):
        assert a.shape == (1, size, size)


def test_full_scale_channel_progression():
    specs = {name: (cin, cout) for name, cin, cout, _ in _unit_specs(Architecture(scale=1))}
    assert [specs[k][1] for k in ("enc1.b", "enc2.in", "enc3.in", "bridge.in")] == [16, 32, 64, 128]
    assert [specs[k][1] for k in ("dec1.a", "dec2.a", "dec3.a", "head.out")] == [64, 32, 16, 3]
    assert specs["head.out"] == (16, 3)


def test_non_divisible_and_bad_channels_rejected():
    params = init_params(MICRO)
    with pytest.raises(PredictorError):
        predictor_forward(np.zeros((12, 16, 3)), params)
    with pytest.raises(PredictorError):
        predictor_forward(np.zeros((16, 16, 2)), params)
    with pytest.raises(PredictorError):
        predictor_forward(np.zeros((16, 16, 3)), params, mode="test")


def test_sigmoid_relation_and_positivity():
    params = init_params(MICRO, seed=3)
    out, _ = predictor_forward(np.random.default_rng(1).random((2, 16, 16, 3)), params)
    np.testing.assert_allclose(out.P, 1 / (1 + np.exp(-out.phi0)), rtol=1e-12)
    assert out.lambda1.min() > 0 and out.lambda2.min() > 0


def test_zeroed_residual_block_is_identity():
    params = init_params(MICRO, seed=0)
    images = np.random.default_rng(2).random((2, 16, 16, 3))
    ref, _ = predictor_forward(images, params, mode="eval")
    # zeroing the second unit's scale and shift makes the residual branch output zero
    for k in ("bridge.res0.b.bn.gamma", "bridge.res0.b.bn.beta"):
        params.tensors[k][...] = 0.0
    no_branch, _ = predictor_forward(images, params, mode="eval")
    params.tensors["bridge.res0.a.weight"][...] = 123.0  # branch input no longer matters
    again, _ = predictor_forward(images, params, mode="eval")
    np.testing.assert_array_equal(no_branch.phi0, again.phi0)
    assert not np.array_equal(ref.phi0, no_branch.phi0)


def test_init_statistics_and_determinism():
    a, b, c = init_params(Architecture(scale=1), 7), init_params(Architecture(scale=1), 7), init_params(Architecture(scale=1), 8)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors if k.endswith("weight"))
    w = a.tensors["bridge.res0.a.weight"]  # 128*128*9 samples
    assert w.size >= 10_000
    fan_in = w.shape[1] * 9
    assert abs(w.var() / (2.0 / fan_in) - 1.0) < 0.2
    assert all(np.all(a.tensors[k] == 0) for k in a.tensors if k.endswith("bias"))


def test_eval_mode_is_deterministic_and_leaves_buffers():
    params = init_params(MICRO, seed=1)
    img = np.random.default_rng(0).random((16, 16, 3))
    before = {k: v.copy() for k, v in params.buffers.items()}
    a, _ = predictor_forward(img, params, mode="eval")
    b, _ = predictor_forward(img, params, mode="eval")
    np.testing.assert_array_equal(a.phi0, b.phi0)
    for k in before:
        np.testing.assert_array_equal(before[k], params.buffers[k])


def test_zero_upstream_gives_zero_gradients():
    params = init_params(MICRO, seed=0)
    _, cache = predictor_forward(np.random.default_rng(0).random((2, 16, 16, 3)), params)
    grads = predictor_backward(cache)
    assert all(np.all(g == 0) for g in grads.values())


def test_stale_cache_errors():
    params = init_params(MICRO, seed=0)
    img = np.random.default_rng(0).random((2, 16, 16, 3))
    _, cache = predictor_forward(img, params, mode="eval")
    with pytest.raises(StaleCacheError):
        predictor_backward(cache)
    _, cache = predictor_forward(img, params)
    params.version += 1
    with pytest.raises(StaleCacheError):
        predictor_backward(cache)


def _probe_entries(params, rng, per_tensor=2):
    for name, v in params.tensors.items():
        for flat in rng.choice(v.size, size=min(per_tensor, v.size), replace=False):
            yield name, np.unravel_index(flat, v.shape)


@pytest.mark.parametrize("const", [False, True])
def test_predictor_finite_differences(const):
    arch = Architecture(scale=16, n_bridge=1, const_lambda=const)
    params = init_params(arch, seed=4)
    rng = np.random.default_rng(9)
    images = rng.random((2, 16, 16, 3))
    c = rng.normal(size=(4, 2, 16, 16))

    def loss(p):
        out, cache = predictor_forward(images, p)
        return float(np.sum(c[0] * out.lambda1) + np.sum(c[1] * out.lambda2)
                     + np.sum(c[2] * out.phi0) + np.sum(c[3] * out.P)), cache

    _, cache = loss(params)
    grads = predictor_backward(cache, c[0], c[1], c[2], c[3])
    h, worst = 1e-6, 0.0
    for name, idx in _probe_entries(params, np.random.default_rng(0)):
        scale = 1e-5 * np.abs(grads[name]).max() + 1e-12
        q = params.copy()
        q.tensors[name][idx] += h
        up = loss(q)[0]
        q.tensors[name][idx] -= 2 * h
        down = loss(q)[0]
        worst = max(worst, rel_err(grads[name][idx], (up - down) / (2 * h), scale))
    assert worst < 1e-3


def test_end_to_end_finite_differences():
    # backbone -> two evolution steps -> both loss branches, 16x16
    params = init_params(MICRO, seed=2)
    rng = np.random.default_rng(3)
    images = rng.random((2, 16, 16, 3))
    masks = [(rng.random((16, 16)) > 0.5).astype(float) for _ in range(2)]
    cfg = EvolutionConfig(L=2, f=2, kappa_max=np.inf)

    def loss(p):
        out, _ = predictor_forward(images, p)
        vals = []
        for i in range(2):
            tr = evolve(out.phi0[i], images[i], ParameterMaps(out.lambda1[i], out.lambda2[i]), cfg, keep_cache=False)
            vals.append(total_loss(tr.phi_final, out.P[i], masks[i])[0])
        return float(np.mean(vals))

    out, cache = predictor_forward(images, params)
    _, grads = sample_gradients(out, cache, images, masks, cfg, adjoint_clip=None)
    h, worst = 1e-5, 0.0
    for name, idx in _probe_entries(params, np.random.default_rng(1), per_tensor=1):
        scale = 1e-4 * np.abs(grads[name]).max() + 1e-12
        q = params.copy()
        q.tensors[name][idx] += h
        up = loss(q)
        q.tensors[name][idx] -= 2 * h
        down = loss(q)
        worst = max(worst, rel_err(grads[name][idx], (up - down) / (2 * h), scale))
    assert worst < 1e-3


def test_checkpoint_round_trip(tmp_path):
    params = init_params(Architecture(scale=8, const_lambda=True), seed=5)
    path = tmp_path / "m.tdac"
    digest = save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert back.arch == params.arch
    for group in ("tensors", "buffers"):
        a, b = getattr(params, group), getattr(back, group)
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(b[k], a[k].astype(np.float32))
    buf = io.BytesIO()
    assert save_checkpoint(buf, back) == digest


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.tdac"
    save_checkpoint(path, init_params(MICRO))
    data = path.read_bytes()
    for bad in (b"XXXXXXXX" + data[8:], data[:-4], data + b"\0\0\0\0"):
        path.write_bytes(bad)
        with pytest.raises(PredictorError):
            load_checkpoint(path)
