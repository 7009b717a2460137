import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamreid import nn
from hamreid import tensor as T
from hamreid.nn import BatchNormParams, Conv2dParams, LinearParams
from hamreid.tensor import Tensor, make_rng


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]))
    xp[:, :, pad[0] : pad[0] + h, pad[1] : pad[1] + wd] = x
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (wd + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[i, ci, y * stride[0] + u, z * stride[1] + v]
                    out[i, o, y, z] = acc
    return out


def naive_pool(x, kind, win, stride):
    n, c, h, w = x.shape
    ho, wo = (h - win[0]) // stride[0] + 1, (w - win[1]) // stride[1] + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for z in range(wo):
                    cell = x[i, ch, y * stride[0] : y * stride[0] + win[0],
                             z * stride[1] : z * stride[1] + win[1]]
                    out[i, ch, y, z] = cell.max() if kind == "max" else cell.mean()
    return out


def bn(c, gamma=1.0, beta=0.0):
    return BatchNormParams(Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)),
                           np.zeros(c), np.ones(c))


def test_conv_1x1_identity_weight_leaves_input():
    x = make_rng(0).normal(size=(2, 3, 4, 5))
    p = Conv2dParams(Tensor(np.eye(3).reshape(3, 3, 1, 1)), None, 1, 0)
    np.testing.assert_array_equal(nn.conv2d(Tensor(x), p).data, x)


def test_conv_ones_kernel_sums_to_nine():
    out = nn.conv2d(Tensor(np.ones((1, 1, 3, 3))),
                    Conv2dParams(Tensor(np.ones((1, 1, 3, 3))), None, 1, 0))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
       st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1), st.integers(0, 10**6))
def test_conv_matches_naive_loops(cin, cout, h, w, k, stride, pad, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(2, cin, h, w))
    wt, b = rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
    got = nn.conv2d(Tensor(x), Conv2dParams(Tensor(wt), Tensor(b), stride, pad)).data
    want = naive_conv(x, wt, b, (stride, stride), (pad, pad))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv_asymmetric_stride_and_padding():
    rng = make_rng(7)
    x, wt = rng.normal(size=(1, 2, 6, 5)), rng.normal(size=(3, 2, 3, 2))
    got = nn.conv2d(Tensor(x), Conv2dParams(Tensor(wt), None, (2, 1), (1, 0))).data
    np.testing.assert_allclose(got, naive_conv(x, wt, None, (2, 1), (1, 0)), atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(np.ones((1, 2, 4, 4))), Conv2dParams(Tensor(np.ones((1, 3, 1, 1))), None))


def test_batchnorm_train_normalizes():
    x = make_rng(1).normal(3.0, 5.0, size=(8, 4, 3, 3))
    y = nn.batchnorm(Tensor(x), bn(4), train=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_affine_on_normalized_input():
    x = make_rng(2).normal(size=(16, 2, 2, 2))
    y = nn.batchnorm(Tensor(x), bn(2, gamma=2.0, beta=3.0), train=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 3.0, atol=1e-6)
    # eps sits inside the root, so the std falls short of 2 by a known factor
    v = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 2.0 * np.sqrt(v / (v + 1e-5)), rtol=1e-12)


def test_batchnorm_eval_with_unit_stats_is_affine():
    x = make_rng(3).normal(size=(2, 3, 2, 2))
    p = BatchNormParams(Tensor(np.array([1.0, 2.0, -1.0])), Tensor(np.array([0.0, 1.0, 0.5])),
                        np.zeros(3), np.full(3, 1.0 - 1e-5))
    y = nn.batchnorm(Tensor(x), p, train=False).data
    want = x * p.gamma.data.reshape(1, 3, 1, 1) + p.beta.data.reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(y, want)


def test_batchnorm_running_stats_update():
    x = make_rng(4).normal(2.0, 3.0, size=(5, 2, 2, 2))
    p = bn(2)
    nn.batchnorm(Tensor(x), p, train=True)
    n = 5 * 4
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batchnorm_update_false_keeps_running_stats():
    p = bn(2)
    nn.batchnorm(Tensor(make_rng(5).normal(size=(4, 2, 2, 2))), p, train=True, update=False)
    np.testing.assert_array_equal(p.running_mean, 0.0)
    np.testing.assert_array_equal(p.running_var, 1.0)


def test_batchnorm_2d_input():
    y = nn.batchnorm(Tensor(make_rng(6).normal(size=(10, 3))), bn(3), train=True).data
    np.testing.assert_allclose(y.mean(0), 0.0, atol=1e-12)


def test_pool_unit_window_is_identity():
    x = make_rng(0).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(nn.pool2d(Tensor(x), "max", 1).data, x)
    np.testing.assert_array_equal(nn.pool2d(Tensor(x), "avg", 1).data, x)


def test_max_pool_constant_map():
    out = nn.pool2d(Tensor(np.full((2, 4, 4), 1.5)), "max", 2)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 2), 1.5))


def test_avg_pool_hand_case():
    out = nn.pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), "avg", 2)
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 2.5


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("win,stride", [((2, 2), (2, 2)), ((3, 2), (1, 2)), ((2, 3), (2, 1))])
def test_pool_matches_naive_loops(kind, win, stride):
    x = make_rng(8).normal(size=(2, 3, 7, 6))
    got = nn.pool2d(Tensor(x), kind, win, stride).data
    np.testing.assert_allclose(got, naive_pool(x, kind, win, stride), rtol=0, atol=1e-12)


def test_pool_rejects_bad_kind_and_window():
    with pytest.raises(ValueError):
        nn.pool2d(Tensor(np.ones((1, 2, 2))), "median", 2)
    with pytest.raises(ValueError):
        nn.pool2d(Tensor(np.ones((1, 2, 2))), "max", 3)


def test_global_pools_constant_map():
    mx, av = nn.global_pools(Tensor(np.full((3, 2, 5), -0.7)))
    np.testing.assert_array_equal(mx.data, np.full(3, -0.7))
    np.testing.assert_allclose(av.data, np.full(3, -0.7), rtol=1e-15)


def test_global_pools_single_spike():
    x = np.zeros((1, 4, 5))
    x[0, 2, 3] = 6.0
    mx, av = nn.global_pools(Tensor(x))
    assert mx.data[0] == 6.0
    assert av.data[0] == pytest.approx(6.0 / 20, abs=1e-15)


def test_activation_scalars():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-3.0, 3.0]))).data, [0.0, 3.0])


def test_sigmoid_strictly_inside_unit_interval():
    y = T.sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all((y > 0) & (y < 1))
    assert np.all(np.isfinite(T.sigmoid(Tensor(np.array([-1e4, 1e4]))).data))


def test_linear_identity_weight():
    x = make_rng(1).normal(size=(3, 4))
    out = nn.linear(Tensor(x), LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4))))
    np.testing.assert_array_equal(out.data, x)


def test_linear_matches_loops():
    rng = make_rng(2)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    want = np.array([[b[o] + sum(w[o, i] * x[n, i] for i in range(4)) for o in range(5)]
                     for n in range(3)])
    got = nn.linear(Tensor(x), LinearParams(Tensor(w), Tensor(b))).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_kaiming_and_uniform_init_scales():
    rng = make_rng(0)
    w = nn.kaiming_normal(rng, (64, 32, 3, 3))
    assert w.std() == pytest.approx(np.sqrt(2 / 288), rel=0.05)
    u = nn.uniform_fan_in(rng, (10, 25))
    assert np.abs(u).max() <= 0.2
