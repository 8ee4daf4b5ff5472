import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volt3d import layers as L
from volt3d import ops, oracle

F64 = np.float64


def rnd(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ------------------------------------------------------------ standard conv

def test_conv_all_ones_counts_taps():
    y = ops.conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert y.shape == (1, 1, 1, 1, 1) and y.item() == 27.0


def test_conv_center_impulse_is_identity():
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1
    x = rnd(0, 1, 2, 4, 5, 3)
    np.testing.assert_array_equal(ops.conv3d(x, w, padding=1), x)


def test_conv_random_matches_oracle():
    x, w = rnd(1, 1, 2, 5, 5, 5), rnd(2, 4, 2, 3, 3, 3)
    assert np.abs(ops.conv3d(x, w, padding=1) - oracle.naive_conv3d(x, w, padding=1)).max() < 1e-10


def test_conv_strided_matches_oracle():
    x, w = rnd(3, 2, 3, 7, 6, 5), rnd(4, 2, 3, 3, 2, 3)
    for s, p in [(2, 0), (2, 1), (3, 1)]:
        assert np.abs(ops.conv3d(x, w, s, p) - oracle.naive_conv3d(x, w, s, p)).max() < 1e-10


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv3d(np.zeros((1, 2, 3, 3, 3)), np.zeros((1, 3, 3, 3, 3)))


def test_conv_nonpositive_extent():
    with pytest.raises(ValueError):
        ops.conv3d(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 3, 3)))


@given(st.integers(1, 9), st.integers(1, 5), st.integers(1, 3), st.integers(0, 3))
def test_output_extent_law(n, k, s, p):
    if n + 2 * p < k:
        with pytest.raises(ValueError):
            ops.conv_out_extent(n, k, s, p)
        return
    e = ops.conv_out_extent(n, k, s, p)
    assert e == (n + 2 * p - k) // s + 1
    x = np.zeros((1, 1, n, 1 + 2 * 0, 1))
    w = np.zeros((1, 1, k, 1, 1))
    assert ops.conv3d(x, w, (s, 1, 1), (p, 0, 0)).shape[2] == e


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 3))
def test_transpose_extent_inverts(n, k, s):
    m = ops.convtranspose_out_extent(n, k, s)
    assert m == (n - 1) * s + k
    assert ops.conv_out_extent(m, k, s, 0) == n


def test_zero_upstream_gives_zero_grads():
    x, w = rnd(5, 1, 2, 4, 4, 4), rnd(6, 3, 2, 3, 3, 3)
    gx, gw = ops.conv3d_backward(np.zeros((1, 3, 4, 4, 4)), x, w, 1, 1)
    assert not gx.any() and not gw.any()


# ------------------------------------------------------------ depthwise conv

def test_depthwise_counting_case():
    x = np.stack([np.ones((3, 3, 3)), 2 * np.ones((3, 3, 3))])[None]
    y = ops.depthwise3d(x, np.ones((2, 3, 3, 3)), np.zeros(2))
    assert y[0, 0].item() == 27.0 and y[0, 1].item() == 54.0


def test_depthwise_bias_only():
    y = ops.depthwise3d(rnd(0, 2, 2, 4, 4, 4), np.zeros((2, 3, 3, 3)), np.array([5.0, -1.0]), padding=1)
    assert (y[:, 0] == 5).all() and (y[:, 1] == -1).all()


def test_depthwise_channel_mismatch():
    with pytest.raises(ValueError):
        ops.depthwise3d(np.zeros((1, 2, 3, 3, 3)), np.zeros((3, 3, 3, 3)))


def test_depthwise_channel_isolation():
    x = rnd(1, 1, 3, 5, 5, 5)
    w = rnd(2, 3, 3, 3, 3)
    y = ops.depthwise3d(x, w, None, 1, 1)
    x2 = x.copy()
    x2[:, 1] += 10
    y2 = ops.depthwise3d(x2, w, None, 1, 1)
    np.testing.assert_array_equal(y[:, [0, 2]], y2[:, [0, 2]])


@pytest.mark.parametrize("n", [1, 8])  # small and large slab code paths
def test_depthwise_matches_oracle_both_paths(n):
    n_ok = min(n, oracle.MAX_BATCH)
    x, w, b = rnd(3, n, 2, 8, 8, 8), rnd(4, 2, 3, 3, 3), rnd(5, 2)
    y = ops.depthwise3d(x, w, b, 1, 1)
    assert np.abs(y[:n_ok] - oracle.naive_depthwise(x[:n_ok], w, b, 1, 1)).max() < 1e-10
    # the batch split must not change any sample
    np.testing.assert_allclose(ops.depthwise3d(x[:1], w, b, 1, 1), y[:1], rtol=0, atol=1e-12)


@given(st.sampled_from([1, 2, 3, 5]), st.integers(1, 4), st.integers(5, 8), st.integers(0, 2**31))
def test_depthwise_reduces_to_per_channel_standard(k, c, n, seed):
    x, w = rnd(seed, 1, c, n, n, n), rnd(seed + 1, c, k, k, k)
    y = ops.depthwise3d(x, w, None, 1, k // 2)
    for m in range(c):
        ref = ops.conv3d(x[:, m:m + 1], w[m][None, None], 1, k // 2)
        assert np.abs(y[:, m:m + 1] - ref).max() <= 1e-12


# ------------------------------------------------------------ pointwise conv

def test_pointwise_sum():
    x = np.array([3.0, 4.0]).reshape(1, 2, 1, 1, 1)
    assert ops.pointwise(x, np.array([[1.0, 1.0]]), np.zeros(1)).item() == 7.0


def test_pointwise_identity():
    x = rnd(0, 2, 3, 2, 3, 4)
    np.testing.assert_array_equal(ops.pointwise(x, np.eye(3), np.zeros(3)), x)


def test_pointwise_channel_mismatch():
    with pytest.raises(ValueError):
        ops.pointwise(np.zeros((1, 2, 1, 1, 1)), np.zeros((3, 3)))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_pointwise_equals_k1_conv(cin, cout, seed):
    x, w = rnd(seed, 2, cin, 3, 2, 4), rnd(seed + 1, cout, cin)
    ref = ops.conv3d(x, w[:, :, None, None, None])
    assert np.abs(ops.pointwise(x, w) - ref).max() <= 1e-12


# ------------------------------------------------- depthwise-separable unit

def _set_bn_identity(unit):
    for name, p in unit.named_params():
        if name.endswith("gamma"):
            p.data[...] = 1
        elif name.endswith("beta"):
            p.data[...] = 0


def test_dwsep_inference_bn_identity():
    unit = L.DepthwiseSeparable3d(3, 4, seed=1, dtype=F64)
    _set_bn_identity(unit)
    for b in ("bn1", "bn2"):
        unit._children[b]._buffers["running_mean"][...] = 0
        unit._children[b]._buffers["running_var"][...] = 1
    x = rnd(2, 2, 3, 4, 4, 4)
    dw, pw = unit._children["dw"], unit._children["pw"]
    h = ops.relu(ops.depthwise3d(x, dw._params["weight"].data, dw._params["bias"].data, 1, 1))
    ref = ops.relu(ops.pointwise(h, pw._params["weight"].data, pw._params["bias"].data))
    # eps keeps the inference BN a hair away from the identity
    np.testing.assert_allclose(unit.forward(x, training=False), ref / math.sqrt(1 + 1e-5) ** 2, atol=1e-12)


@given(st.integers(0, 2**31))
def test_dwsep_output_nonnegative(seed):
    unit = L.DepthwiseSeparable3d(2, 3, seed=seed % 1000, dtype=F64)
    assert (unit.forward(rnd(seed, 2, 2, 4, 4, 4)) >= 0).all()


@given(st.sampled_from([1, 2, 3]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_rank1_kernel_factorizes(k, cin, cout, seed):
    d, p = rnd(seed, cin, k, k, k), rnd(seed + 1, cout, cin)
    full = p[:, :, None, None, None] * d[None]
    x = rnd(seed + 2, 1, cin, 5, 5, 5)
    pad = k // 2
    unit = L.DepthwiseSeparable3d(cin, cout, k, batchnorm=False, activation=False,
                                  inner_activation=False, dtype=F64)
    unit._children["dw"]._params["weight"].data[...] = d
    unit._children["pw"]._params["weight"].data[...] = p
    ref = ops.conv3d(x, full, 1, pad)
    assert np.abs(unit.forward(x) - ref).max() <= 1e-10


# ---------------------------------------------------------------- pseudo-3D

def test_pseudo_horizontal_counting_case():
    consts = np.array([1.0, 2.0, 4.0])
    x = np.broadcast_to(consts[None, :, None, None, None], (1, 3, 3, 3, 3)).copy()
    h = ops.conv3d(x, np.ones((3, 3, 1, 3, 3)))
    assert h.shape == (1, 3, 3, 1, 1)
    assert np.all(h == 9 * consts.sum())


def test_pseudo_identity_composition():
    unit = L.Pseudo3d(2, 2, dtype=F64)
    _set_bn_identity(unit)
    for b in ("bn1", "bn2"):
        unit._children[b]._buffers["running_mean"][...] = 0
        unit._children[b]._buffers["running_var"][...] = 1
    hw = unit._children["horizontal"]._params["weight"].data
    vw = unit._children["vertical"]._params["weight"].data
    hw[...] = 0
    vw[...] = 0
    for c in range(2):
        hw[c, c, 0, 1, 1] = 1
        vw[c, c, 1, 0, 0] = 1
    x = rnd(7, 2, 2, 4, 4, 4)
    np.testing.assert_allclose(unit.forward(x, training=False), ops.relu(x) / (1 + 1e-5), atol=1e-12)


def test_pseudo_vs_chained_oracle():
    unit = L.Pseudo3d(3, 2, batchnorm=False, activation=False, inner_activation=False, seed=3, dtype=F64)
    hw = unit._children["horizontal"]._params["weight"].data
    vw = unit._children["vertical"]._params["weight"].data
    x = rnd(8, 2, 3, 5, 4, 6)
    ref = oracle.naive_pseudo(x, hw[:, :, 0], vw[:, :, :, 0, 0], padding=1)
    assert np.abs(unit.forward(x) - ref).max() < 1e-10


# ----------------------------------------------------------- transposed conv

def test_convtranspose_scatter():
    y = ops.conv_transpose3d(np.full((1, 1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2, 2)), 2)
    assert y.shape == (1, 1, 2, 2, 2) and (y == 2.5).all()


def test_convtranspose_impulse_response():
    w = rnd(0, 1, 1, 4, 4, 4)
    np.testing.assert_array_equal(ops.conv_transpose3d(np.ones((1, 1, 1, 1, 1)), w, 1)[0, 0], w[0, 0])


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
       st.integers(1, 4), st.integers(0, 2**31))
def test_convtranspose_is_adjoint(cin, cout, k, s, n, seed):
    x = rnd(seed, 2, cin, n, n + 1, n)
    w = rnd(seed + 1, cin, cout, k, k, k)
    y = ops.conv_transpose3d(x, w, s)
    g = rnd(seed + 2, *y.shape)
    lhs = np.sum(y * g)
    rhs = np.sum(x * ops.conv3d(g, w, s, 0))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ------------------------------------------------------------ normalization

def test_batchnorm_hand_value():
    x = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1, 1)
    mean, var, _ = ops.batch_stats(x)
    y, _ = ops.batchnorm(x, np.ones(1), np.zeros(1), mean, var, 1e-5)
    # (v - 2) / sqrt(2/3 + 1e-5)
    np.testing.assert_allclose(y.ravel(), [-1.2247356859, 0.0, 1.2247356859], atol=1e-9)


@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_batchnorm_standardizes(n, c, seed):
    x = rnd(seed, n, c, 2, 2, 2) * 3 + 1
    mean, var, _ = ops.batch_stats(x)
    _, xhat = ops.batchnorm(x, np.ones(c), np.zeros(c), mean, var, 0.0)
    m = xhat.mean(axis=(0, 2, 3, 4))
    v = xhat.var(axis=(0, 2, 3, 4))
    assert np.abs(m).max() <= 1e-10 and np.abs(v - 1).max() <= 1e-6


def test_batchnorm_degenerate_batch():
    with pytest.raises(ValueError):
        ops.batch_stats(np.zeros((1, 2, 1, 1, 1)))


def test_batchnorm_running_stats_update():
    bn = L.BatchNorm(1, dtype=F64)
    x = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1, 1)
    bn.forward(x, training=True)
    assert bn._buffers["running_mean"][0] == pytest.approx(0.2)
    assert bn._buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_relu():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_maxpool_window_max():
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    y, _ = ops.maxpool3d(x, 2)
    assert y.item() == 8.0


@given(st.integers(0, 2**31))
def test_maxpool_dominates_window(seed):
    x = rnd(seed, 2, 3, 4, 4, 4)
    y, _ = ops.maxpool3d(x, 2)
    up = y.repeat(2, 2).repeat(2, 3).repeat(2, 4)
    assert (up >= x).all()


@given(st.integers(0, 2**31))
def test_relu_nonnegative(seed):
    assert (ops.relu(rnd(seed, 50)) >= 0).all()


def test_fully_connected_shape_error():
    with pytest.raises(ValueError):
        ops.fully_connected(np.zeros((2, 3)), np.zeros((4, 5)))


# -------------------------------------------------------------------- losses

def test_uniform_logits_cross_entropy():
    loss, _ = ops.softmax_cross_entropy(np.zeros((4, 13)), [0, 3, 7, 12])
    assert loss == pytest.approx(math.log(13), abs=1e-12)
    assert loss == pytest.approx(2.5649, abs=1e-4)


def test_confident_correct_logits_approach_zero_loss():
    logits = np.full((2, 13), -50.0)
    logits[0, 4] = logits[1, 9] = 50.0
    assert ops.softmax_cross_entropy(logits, [4, 9])[0] < 1e-30


def test_losses_reject_nonfinite():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(ValueError):
        ops.voxel_bce(np.array([np.inf]), np.array([1.0]))


def test_label_range_checked():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_voxel_bce_value():
    loss, _ = ops.voxel_bce(np.zeros((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)))
    assert loss == pytest.approx(math.log(2))


def test_sigmoid_stable_at_extremes():
    s = ops.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])
