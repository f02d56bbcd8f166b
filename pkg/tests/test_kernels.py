import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeline import kernels as K
from shapeline.errors import InvalidHyperparameterError, ShapeMismatchError, StaleGraphError


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, oc, r, s] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0)
    return out


def pool_oracle(x, k=3, s=2):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for r in range(ho):
        for q in range(wo):
            out[:, :, r, q] = x[:, :, r * s:r * s + k, q * s:q * s + k].max(axis=(2, 3))
    return out


# --- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    assert np.array_equal(K.conv2d(x, np.ones((1, 1, 1, 1))), x)


def test_conv_diagonal_kernel_example():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = K.conv2d(x, w, np.zeros(1))
    # out[r, s] = x[r, s] + x[r+1, s+1]
    assert out[0, 0].tolist() == [[6, 8], [12, 14]]
    assert np.array_equal(out, conv_oracle(x, w, np.zeros(1), 1, 0))


def test_conv_full_size_spatial_output():
    x = np.zeros((1, 3, 224, 224), np.float32)
    w = np.zeros((2, 3, 7, 7), np.float32)
    assert K.conv2d(x, w, stride=2, padding=3).shape == (1, 2, 112, 112)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 3, 7), (1, 0, 1)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(K.conv2d(x, w, b, stride, pad), conv_oracle(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeMismatchError):
        K.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(InvalidHyperparameterError):
        K.conv2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    lhs = K.conv2d(a * x + b * y, w, padding=1)
    rhs = a * K.conv2d(x, w, padding=1) + b * K.conv2d(y, w, padding=1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# --- batch norm -------------------------------------------------------------

def test_bn_hand_example():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out = K.batchnorm2d(x, np.ones(1), np.zeros(1), eps=1e-5)
    np.testing.assert_allclose(out.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


def test_bn_fixed_point_and_constant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    np.testing.assert_allclose(K.batchnorm2d(x, np.ones(2), np.zeros(2)), x, atol=1e-3)
    const = np.full((2, 2, 3, 3), 7.0)
    np.testing.assert_allclose(K.batchnorm2d(const, np.ones(2), np.array([0.5, -2.0])),
                               np.broadcast_to(np.array([0.5, -2.0])[None, :, None, None], const.shape))


def test_bn_running_stats_and_eval():
    x = np.arange(8, dtype=float).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    K.batchnorm2d(x, np.ones(1), np.zeros(1), running_stats=(rm, rv))
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))
    out = K.batchnorm2d(x, np.ones(1), np.zeros(1), mode="eval", running_stats=(rm, rv))
    np.testing.assert_allclose(out, (x - rm[0]) / np.sqrt(rv[0] + 1e-5))


def test_bn_degenerate_batch():
    with pytest.raises(InvalidHyperparameterError):
        K.batchnorm2d(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


# --- relu / pool / dense / dropout -----------------------------------------

def test_relu():
    assert K.relu(np.array([-1.0, 0.0, 2.5])).tolist() == [0, 0, 2.5]


def test_maxpool_ramp_and_sizes():
    ramp = (5 * np.arange(5)[:, None] + np.arange(5)[None, :]).astype(float).reshape(1, 1, 5, 5)
    assert K.maxpool2d(ramp)[0, 0].tolist() == [[12, 14], [22, 24]]
    assert K.maxpool2d(np.zeros((1, 1, 112, 112))).shape[2:] == (55, 55)
    assert np.all(K.maxpool2d(np.full((1, 2, 7, 7), 3.0)) == 3.0)
    with pytest.raises(InvalidHyperparameterError):
        K.maxpool2d(np.zeros((1, 1, 2, 5)))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), seed=st.integers(0, 2 ** 16))
def test_maxpool_matches_oracle_and_bounds(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, 2, h, w))
    out = K.maxpool2d(x)
    np.testing.assert_array_equal(out, pool_oracle(x))
    assert out.max() <= x.max() and out.min() >= x.min()


def test_dense_examples():
    x = np.array([[1.0, 2.0]])
    assert K.dense(x, np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([0.0, 1.0])).tolist() == [[3, 3]]
    assert np.array_equal(K.dense(x, np.eye(2), np.zeros(2)), x)
    assert K.Dense(6400, 2048).forward(np.zeros((1, 6400), np.float32)).shape == (1, 2048)
    with pytest.raises(ShapeMismatchError):
        K.dense(np.zeros((1, 3)), np.zeros((2, 2)))


def test_dropout():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert K.dropout(x, 0.0, "train") is x
    assert K.dropout(x, 0.7, "eval") is x
    ones = np.ones(10 ** 5)
    out = K.dropout(ones, 0.5, "train", np.random.default_rng(3))
    assert abs(out.mean() - 1.0) <= 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}
    with pytest.raises(InvalidHyperparameterError):
        K.dropout(x, 1.0)


# --- loss ---------------------------------------------------------------

def test_cross_entropy_examples():
    uniform = K.softmax_cross_entropy(np.zeros((3, 28)), K.one_hot([0, 5, 27], 28, np.float64))
    assert uniform.loss == pytest.approx(math.log(28), abs=1e-12)
    assert round(math.log(28), 4) == 3.3322
    sat = np.zeros((1, 4))
    sat[0, 2] = 1e6
    assert K.softmax_cross_entropy(sat, K.one_hot([2], 4, np.float64)).loss < 1e-6
    r = K.softmax_cross_entropy(np.array([[0.0, math.log(3)]]), np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(r.probabilities, [[0.25, 0.75]])
    assert r.loss == pytest.approx(-math.log(0.75))
    assert round(r.loss, 4) == 0.2877
    np.testing.assert_allclose(r.logit_grad, [[0.25, -0.25]])


def test_cross_entropy_rejects_non_one_hot():
    with pytest.raises(ValueError):
        K.softmax_cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 16), scale=st.floats(0.01, 100))
def test_softmax_rows_sum_to_one(seed, scale):
    logits = np.random.default_rng(seed).standard_normal((5, 28)) * scale
    res = K.softmax_cross_entropy(logits, K.one_hot(np.arange(5), 28, np.float64))
    np.testing.assert_allclose(res.probabilities.sum(axis=1), 1.0, atol=1e-6)
    assert res.loss >= 0


# --- sgd ------------------------------------------------------------------

def test_sgd_examples():
    p = K.Parameter(np.array([1.0]))
    p.grad[...] = 1.0
    K.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.value[0] == pytest.approx(0.9)
    q = K.Parameter(np.array([1.0]))
    for _ in range(2):
        q.grad[...] = 1.0
        K.sgd_step([q], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert q.value[0] == pytest.approx(0.71)
    assert (K.SGD_LR, K.SGD_MOMENTUM, K.SGD_WEIGHT_DECAY) == (1e-3, 0.9, 0.0005)


def test_sgd_weight_decay_and_vanilla_equivalence():
    rng = np.random.default_rng(0)
    v, g = rng.standard_normal(5), rng.standard_normal(5)
    p = K.Parameter(v.copy(), g.copy())
    K.sgd_step([p], lr=0.05, momentum=0.0, weight_decay=0.0)
    assert np.array_equal(p.value, v - 0.05 * g)
    p = K.Parameter(v.copy(), g.copy())
    K.sgd_step([p], lr=0.05, momentum=0.9, weight_decay=0.01)
    np.testing.assert_allclose(p.value, v - 0.05 * (g + 0.01 * v))


# --- backward ---------------------------------------------------------------

def test_zero_loss_grad_gives_zero_param_grads():
    layer = K.ResidualBlock(8, 3, rng=np.random.default_rng(0))
    layer.forward(np.random.default_rng(1).standard_normal((2, 8, 5, 5)).astype(np.float32), train=True)
    K.backward(layer, np.zeros((2, 8, 5, 5), np.float32))
    assert all(not p.grad.any() for _, p in layer.named_parameters())


def test_dense_quadratic_loss_closed_form():
    layer = K.Dense(3, 1, dtype=np.float64)
    x = np.array([[1.0, -2.0, 0.5]])
    y = layer.forward(x, train=True)
    K.backward(layer, 2 * y)  # d/dy of y^2
    np.testing.assert_allclose(layer.weight.grad, 2 * y * x)
    np.testing.assert_allclose(layer.bias.grad, 2 * y[:, 0])


def test_stale_graph():
    layer = K.Conv2d(1, 1, 3, padding=1)
    layer.forward(np.zeros((1, 1, 4, 4), np.float32), train=True)
    layer.backward(np.zeros((1, 1, 4, 4), np.float32))
    with pytest.raises(StaleGraphError):
        layer.backward(np.zeros((1, 1, 4, 4), np.float32))
    layer.forward(np.zeros((1, 1, 4, 4), np.float32))  # eval mode records nothing
    with pytest.raises(StaleGraphError):
        layer.backward(np.zeros((1, 1, 4, 4), np.float32))


# --- gradient checks -------------------------------------------------------

def test_grad_check_dense_tight():
    layer = K.Dense(6, 4, rng=np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((3, 6))
    assert K.grad_check(layer, x, eps=1e-5) <= 1e-6


def test_grad_check_conv_bn_relu_stack():
    # a bias feeding batch norm has an exactly-zero gradient, which no relative
    # error can resolve, so the conv carries none (as in the network)
    rng = np.random.default_rng(2)
    stack = K.Sequential(("conv", K.Conv2d(2, 4, 3, padding=1, bias=False, rng=rng, dtype=np.float64)),
                         ("bn", K.BatchNorm2d(4, dtype=np.float64)), ("relu", K.ReLU()))
    assert K.grad_check(stack, rng.standard_normal((3, 2, 6, 6))) <= 1e-4


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        K.grad_check(K.Dense(2, 2), np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_kind_grad_check(seed):
    from shapeline.model import layer_check_cases

    for kind, layer, x in layer_check_cases(seed):
        err = K.grad_check(layer, x, max_entries=8, seed=seed)
        assert err <= 1e-4, (kind, err)


def test_grad_check_restores_running_stats():
    bn = K.BatchNorm2d(2, dtype=np.float64)
    before = [b.copy() for _, b in bn.named_buffers()]
    K.grad_check(bn, np.random.default_rng(0).standard_normal((3, 2, 4, 4)))
    for b0, (_, b1) in zip(before, bn.named_buffers()):
        assert np.array_equal(b0, b1)


def test_eval_forward_is_bit_deterministic():
    def make():
        return K.Sequential(("conv", K.Conv2d(3, 8, 3, padding=1, rng=np.random.default_rng(5))),
                            ("res", K.ResidualBlock(8, 3, rng=np.random.default_rng(6))))
    x = np.random.default_rng(7).standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(make().forward(x), make().forward(x))


def test_adaptive_pool_even_split_is_block_mean():
    x = np.arange(32, dtype=float).reshape(1, 2, 4, 4)
    out = K.AdaptiveAvgPool2d((2, 2)).forward(x)
    expected = x.reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out, expected)
