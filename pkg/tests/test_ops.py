import itertools

import numpy as np
import pytest

from attresdunet import ops
from attresdunet.tensor import ShapeError, Tensor

from gradcases import CASES, N_SEEDS, case_for
from oracles import (
    batchnorm_loop,
    conv2d_loop,
    gap_loop,
    gradient_errors,
    maxpool_loop,
    upsample_loop,
)


def _conv_configs():
    for h, w in [(1, 1), (2, 3), (3, 5), (5, 2), (8, 7), (9, 9)]:
        for k, stride, padding, dilation in itertools.product((1, 2, 3), (1, 2), (0, 1, 2), (1, 2, 3)):
            if min(h, w) + 2 * padding - dilation * (k - 1) - 1 >= 0:
                yield h, w, k, stride, padding, dilation


def test_conv2d_matches_loop_oracle_sweep():
    rng = np.random.default_rng(0)
    checked = 0
    for h, w, k, stride, padding, dilation in _conv_configs():
        x = rng.standard_normal((2, 2, h, w)).astype(np.float32)
        wt = rng.standard_normal((3, 2, k, k)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding, dilation).data
        want = conv2d_loop(x, wt, b, stride, padding, dilation)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)
        checked += 1
    assert checked > 250


def test_conv2d_hand_example():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = ops.conv2d(x, w).data
    np.testing.assert_array_equal(out[0, 0], [[8, 12], [20, 24]])


def test_conv2d_errors_name_axis():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError) as err:
        ops.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    assert err.value.axis == "C"
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.zeros((1, 3, 2, 8))), Tensor(np.zeros((2, 3, 3, 3))))
    assert err.value.axis == "H"


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (3, 3), (2, 1)])
def test_maxpool_matches_loop_oracle(window, stride):
    rng = np.random.default_rng(window * 10 + stride)
    for h in range(window, 10):
        for w in (window, 5, 9):
            x = rng.standard_normal((2, 3, h, w)).astype(np.float32)
            np.testing.assert_allclose(ops.maxpool2d(Tensor(x), window, stride).data, maxpool_loop(x, window, stride), atol=1e-6)


def test_maxpool_ties_route_gradient_to_first_max():
    x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    ops.maxpool2d(x).backward(np.ones((1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 1, 4))))


def test_upsample_matches_loop_oracle_sweep():
    rng = np.random.default_rng(1)
    for h in range(1, 7):
        for w in range(1, 7):
            x = rng.standard_normal((2, 2, h, w)).astype(np.float32)
            np.testing.assert_allclose(ops.upsample_bilinear2x(Tensor(x)).data, upsample_loop(x), atol=1e-5)


def test_upsample_constant_and_weights():
    x = Tensor(np.full((1, 1, 3, 4), 2.5, dtype=np.float32))
    np.testing.assert_allclose(ops.upsample_bilinear2x(x).data, 2.5)
    # a two-pixel row: outputs sit at 1/4 and 3/4 between the samples
    row = Tensor(np.array([[[[0.0, 4.0]]]], dtype=np.float32))
    np.testing.assert_allclose(ops.upsample_bilinear2x(row).data[0, 0, 0], [0, 1, 3, 4])


def test_gap_matches_loop_oracle_sweep():
    rng = np.random.default_rng(2)
    for h, w in itertools.product(range(1, 6), repeat=2):
        x = rng.standard_normal((2, 3, h, w)).astype(np.float32)
        np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, gap_loop(x), atol=1e-6)


def test_broadcast_spatial_shape_and_values():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3, 1, 1))
    out = ops.broadcast_spatial(x, 4, 5).data
    assert out.shape == (2, 3, 4, 5)
    assert np.all(out[1, 2] == 5)


def test_batchnorm_train_matches_scalar_oracle_and_updates_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32) * 2 + 1
    gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    beta = rng.standard_normal(3).astype(np.float32)
    stats = ops.RunningStats.initial(3)
    out = ops.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), stats, training=True).data
    want, mean, var = batchnorm_loop(x, gamma, beta)
    np.testing.assert_allclose(out, want, atol=1e-5)
    np.testing.assert_allclose(stats.mean, 0.1 * mean, atol=1e-6)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var, atol=1e-5)


def test_batchnorm_inference_uses_running_stats():
    x = np.full((1, 2, 2, 2), 3.0, dtype=np.float32)
    stats = ops.RunningStats(np.array([1.0, 3.0], np.float32), np.array([4.0, 1.0], np.float32))
    out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=False).data
    np.testing.assert_allclose(out[0, 0], 2.0 / np.sqrt(4.0 + 1e-5), rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], 0.0, atol=1e-7)


def test_batchnorm_inference_requires_stats():
    with pytest.raises(RuntimeError):
        ops.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), ops.RunningStats(), False)


def test_sigmoid_strictly_inside_unit_interval():
    out = ops.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))).data
    assert np.all(out > 0) and np.all(out < 1)
    assert out[2] == 0.5


def test_binary_broadcast_rejects_other_shapes():
    a = Tensor(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.zeros((2, 3, 4, 1))))
    with pytest.raises(ShapeError):
        ops.mul(a, Tensor(np.zeros((1, 3, 4, 4))))


def test_elementwise_dispatch():
    a = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(ops.elementwise("relu", a).data, [0, 2])
    np.testing.assert_array_equal(ops.elementwise("mul", a, a).data, [1, 4])
    with pytest.raises(ValueError):
        ops.elementwise("tanh", a)


def test_concat_and_slice_are_inverse():
    rng = np.random.default_rng(4)
    a = Tensor(rng.standard_normal((2, 2, 3, 3)))
    b = Tensor(rng.standard_normal((2, 3, 3, 3)))
    cat = ops.concat_channels(a, b)
    np.testing.assert_array_equal(ops.slice_channels(cat, 2, 5).data, b.data)
    with pytest.raises(ShapeError):
        ops.concat_channels(a, Tensor(np.zeros((2, 1, 4, 3))))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    for seed in range(N_SEEDS):
        build, arrays = case_for(name, seed)
        errors = gradient_errors(build, arrays, seed)
        assert max(errors) < 1e-3, f"{name} seed {seed}: {errors}"


def test_small_worked_examples():
    x = np.random.default_rng(11).standard_normal((1, 1, 4, 5)).astype(np.float32)
    identity = Tensor(np.ones((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), identity).data, x)
    ones = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
    assert ones.shape == (1, 1, 1, 1) and ones[0, 0, 0, 0] == 9
    pool = ops.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data
    assert pool.shape == (1, 1, 1, 1) and pool[0, 0, 0, 0] == 4
    up = ops.upsample_bilinear2x(Tensor(np.full((1, 1, 1, 1), 0.75))).data
    np.testing.assert_array_equal(up, np.full((1, 1, 2, 2), 0.75))
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))).data, [[[[4.0]]]])
    cat = ops.concat_channels(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 4, 4))))
    assert cat.shape == (2, 8, 4, 4)


def test_batchnorm_worked_examples():
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    const = np.full((2, 2, 3, 3), 4.0, np.float32)
    out = ops.batchnorm2d(Tensor(const), gamma, beta, ops.RunningStats.initial(2), training=True).data
    np.testing.assert_array_equal(out, 0)
    # already standardized per channel: passes through up to eps
    z = np.array([-1.0, 1.0, -1.0, 1.0], np.float32).reshape(1, 1, 2, 2).repeat(2, axis=1)
    out = ops.batchnorm2d(Tensor(z), gamma, beta, ops.RunningStats.initial(2), training=True).data
    np.testing.assert_allclose(out, z, atol=1e-5)
    stats = ops.RunningStats(np.full(1, 0.5, np.float32), np.full(1, 0.25, np.float32))
    x = Tensor(np.array([[[[1.0]]]], np.float32))
    out = ops.batchnorm2d(x, Tensor(np.full(1, 2.0)), Tensor(np.ones(1)), stats, training=False).data
    np.testing.assert_allclose(out, 2.0 * 0.5 / np.sqrt(0.25 + 1e-5) + 1.0, rtol=1e-6)


def test_backward_worked_examples():
    x = Tensor(np.array([-2.0, -0.5, -1e-3]), requires_grad=True)
    ops.sum_all(ops.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, 0)
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = Tensor(np.array([4.0, -5.0, 6.0]), requires_grad=True)
    ops.sum_all(ops.mul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)
