"""
神经网络引擎测试：各层与暴力求和对照、梯度检验、优化器与初始化
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nn_engine import (
    ConvParams,
    LAYER_CHECKS,
    TrainConfig,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    glorot_bound,
    glorot_init,
    gradcheck_suite,
    l1_loss,
    maxpool2_backward,
    maxpool2_forward,
    numerical_gradient,
    relu_backward,
    relu_forward,
    sgd_momentum_step,
    split_channels,
    upconv2_forward,
)
from pat_core import ConfigValidationError, ShapeMismatchError, make_rng


# ==================== 卷积 ====================

def _conv_reference(x, weight, bias, padding):
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, h + 2 * padding - k + 1, w + 2 * padding - k + 1))
    for b in range(n):
        for oc in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[b, oc, i, j] = np.sum(xp[b, :, i:i + k, j:j + k] * weight[oc]) + bias[oc]
    return out


def test_conv_matches_nested_loops():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    weight = np.array([[[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]]])
    bias = np.array([0.5])
    out, _ = conv2d_forward(x, ConvParams(weight, bias))
    assert np.array_equal(out, _conv_reference(x, weight, bias, 1))


def test_conv_random_multichannel():
    rng = make_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    weight = rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    out, _ = conv2d_forward(x, ConvParams(weight, bias))
    assert np.allclose(out, _conv_reference(x, weight, bias, 1))


def test_conv_even_kernel_needs_explicit_padding():
    with pytest.raises(ConfigValidationError):
        ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))
    ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), stride=2, padding=0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), ConvParams(np.zeros((1, 3, 3, 3)), np.zeros(1)))


def test_conv_backward_bias_is_sum():
    rng = make_rng(2)
    x = rng.standard_normal((2, 1, 5, 5))
    _, cache = conv2d_forward(x, ConvParams(rng.standard_normal((3, 1, 3, 3)), np.zeros(3)))
    grad = rng.standard_normal((2, 3, 5, 5))
    _, params = conv2d_backward(grad, cache)
    assert np.allclose(params["bias"], grad.sum(axis=(0, 2, 3)))


# ==================== ReLU / 池化 ====================

def test_relu_zero_gradient_at_zero():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    out, mask = relu_forward(x)
    assert np.array_equal(out.ravel(), [0.0, 0.0, 2.0])
    assert np.array_equal(relu_backward(np.ones_like(x), mask).ravel(), [0.0, 0.0, 1.0])


def test_maxpool_matches_enumeration():
    rng = make_rng(3)
    x = rng.standard_normal((2, 2, 8, 8))
    out, cache = maxpool2_forward(x)
    grad_out = rng.standard_normal(out.shape)
    grad = maxpool2_backward(grad_out, cache)
    expected = np.zeros_like(x)
    for n in range(2):
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    window = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert out[n, c, i, j] == window.max()
                    a, b = np.unravel_index(np.argmax(window), (2, 2))
                    expected[n, c, 2 * i + a, 2 * j + b] = grad_out[n, c, i, j]
    assert np.array_equal(grad, expected)


def test_maxpool_ties_route_to_first():
    x = np.ones((1, 1, 2, 2))
    _, cache = maxpool2_forward(x)
    grad = maxpool2_backward(np.full((1, 1, 1, 1), 3.0), cache)
    assert np.array_equal(grad[0, 0], [[3.0, 0.0], [0.0, 0.0]])


def test_maxpool_odd_size():
    with pytest.raises(ShapeMismatchError):
        maxpool2_forward(np.zeros((1, 1, 3, 4)))


# ==================== 转置卷积 / 拼接 ====================

def test_upconv_is_adjoint_of_strided_conv():
    rng = make_rng(4)
    x = rng.standard_normal((2, 3, 4, 5))
    weight = rng.standard_normal((3, 2, 2, 2))
    y = rng.standard_normal((2, 2, 8, 10))
    up, _ = upconv2_forward(x, weight, np.zeros(2))
    down, _ = conv2d_forward(y, ConvParams(weight, np.zeros(3), stride=2, padding=0))
    lhs = np.sum(up * y)
    rhs = np.sum(x * down)
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(up) * np.linalg.norm(y)


def test_upconv_doubles_spatial_size():
    out, _ = upconv2_forward(np.zeros((1, 4, 3, 3)), np.zeros((4, 2, 2, 2)), np.ones(2))
    assert out.shape == (1, 2, 6, 6)
    assert np.all(out == 1.0)


def test_concat_and_split():
    a = np.zeros((1, 2, 4, 4))
    b = np.ones((1, 3, 4, 4))
    joined = concat_channels(a, b)
    assert joined.shape == (1, 5, 4, 4)
    ga, gb = split_channels(joined, 2)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    with pytest.raises(ShapeMismatchError):
        concat_channels(a, np.ones((1, 3, 2, 2)))


# ==================== 损失 ====================

def test_l1_loss_value_and_gradient():
    pred = np.array([1.0, -2.0, 3.0, 3.0]).reshape(1, 1, 2, 2)
    target = np.array([0.0, 0.0, 3.0, 5.0]).reshape(1, 1, 2, 2)
    loss, grad = l1_loss(pred, target)
    assert loss == pytest.approx((1 + 2 + 0 + 2) / 4)
    assert np.array_equal(grad.ravel(), [0.25, -0.25, 0.0, -0.25])


def test_l1_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        l1_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# ==================== 优化器 / 初始化 ====================

def test_sgd_momentum_two_steps_on_quadratic():
    config = TrainConfig(learning_rate=0.1, momentum=0.9)
    weights = {"w": np.array([1.0])}
    velocity = {}
    for _ in range(2):
        grads = {"w": 2.0 * weights["w"]}     # f(w) = w²
        weights, velocity = sgd_momentum_step(weights, grads, velocity, config)
    # v1 = -0.2, w1 = 0.8；v2 = 0.9·(-0.2) - 0.1·1.6 = -0.34，w2 = 0.46
    assert velocity["w"][0] == pytest.approx(-0.34, abs=1e-15)
    assert weights["w"][0] == pytest.approx(0.46, abs=1e-15)


def test_sgd_learning_rate_override():
    weights, velocity = sgd_momentum_step({"w": np.ones(2)}, {"w": np.ones(2)}, {}, TrainConfig(learning_rate=0.1), 0.01)
    assert np.allclose(velocity["w"], -0.01) and np.allclose(weights["w"], 0.99)


def test_sgd_does_not_modify_inputs():
    weights = {"w": np.ones(3)}
    velocity = {"w": np.full(3, 0.5)}
    sgd_momentum_step(weights, {"w": np.ones(3)}, velocity, TrainConfig())
    assert np.array_equal(weights["w"], np.ones(3)) and np.array_equal(velocity["w"], np.full(3, 0.5))


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        sgd_momentum_step({"w": np.ones(3)}, {"w": np.ones(4)}, {}, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigValidationError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigValidationError):
        TrainConfig(loss="l2")
    with pytest.raises(ConfigValidationError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ConfigValidationError):
        TrainConfig(lr_decay=1.5)


def test_glorot_statistics():
    samples = glorot_init(288, 288, (1000, 1000), seed=0, dtype=np.float64)
    bound = glorot_bound(288, 288)
    assert np.max(np.abs(samples)) <= bound
    sigma_mean = bound / np.sqrt(3.0) / 1000.0
    assert abs(samples.mean()) <= 3 * sigma_mean


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(0, 2 ** 31))
def test_glorot_within_bound(fan_in, fan_out, seed):
    samples = glorot_init(fan_in, fan_out, (50,), seed)
    assert samples.dtype == np.float32
    assert np.all(np.abs(samples) <= np.float32(glorot_bound(fan_in, fan_out)))


def test_glorot_rejects_zero_fan():
    with pytest.raises(ConfigValidationError):
        glorot_init(0, 3, (2,), seed=0)


# ==================== 梯度检验 ====================

def test_numerical_gradient_restores_input():
    x = make_rng(6).standard_normal(5)
    original = x.copy()
    grad = numerical_gradient(lambda: float(np.sum(x ** 2)), x)
    assert np.array_equal(x, original)
    assert np.allclose(grad, 2 * original, atol=1e-8)


def test_gradcheck_suite_all_layers():
    records = gradcheck_suite(configurations=10, seed=0)
    assert len(records) == 10 * len(LAYER_CHECKS)
    failed = [r.to_dict() for r in records if not r.passed]
    assert not failed
    linear = {"conv2d", "upconv2", "concat"}
    assert all(r.tolerance == 1e-6 for r in records if r.layer in linear)


def test_gradcheck_unknown_layer():
    with pytest.raises(ConfigValidationError):
        gradcheck_suite(configurations=1, layers=["softmax"])
