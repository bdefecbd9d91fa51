import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdcnet import ops
from msdcnet.gradcheck import grad_check
from msdcnet.tensor import Parameter, Tensor, make_node, no_grad

from conftest import naive_convolve


# ---------------------------------------------------------------- convolve

def test_convolve_all_ones_kernel():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = ops.convolve(x, w, stride=1, zero_pad=1).data[0, 0]
    assert y[1, 1] == 45
    assert y[0, 0] == 1 + 2 + 4 + 5
    np.testing.assert_array_equal(y, naive_convolve(x.data, w.data, pad=1)[0, 0])


@pytest.mark.parametrize("shape,kshape,stride,pad", [
    ((2, 3, 7, 6), (4, 3, 3, 3), 1, 1),
    ((1, 2, 9, 8), (3, 2, 5, 5), 2, 2),
    ((1, 2, 4, 5, 6), (2, 2, 3, 3, 3), 1, 1),
    ((2, 1, 5, 4, 6), (2, 1, 3, 3, 3), 2, 1),
])
def test_convolve_matches_naive_loops(rng, shape, kshape, stride, pad):
    x, w, b = rng.standard_normal(shape), rng.standard_normal(kshape), rng.standard_normal(kshape[0])
    got = ops.convolve(Tensor(x), Tensor(w), Tensor(b), stride=stride, zero_pad=pad).data
    np.testing.assert_allclose(got, naive_convolve(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_convolve_3d_unit_kernel_scales(rng):
    x = rng.standard_normal((1, 1, 3, 4, 5))
    y = ops.convolve(Tensor(x), Tensor(np.full((1, 1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(y.data, 2 * x)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 9), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_convolve_shape_law(n, k, stride, pad):
    expected = (n + 2 * pad - k) // stride + 1
    x = Tensor(np.zeros((1, 1, n, n + 1)))
    w = Tensor(np.zeros((1, 1, k, k)))
    if expected < 1 or (n + 1 + 2 * pad - k) // stride + 1 < 1:
        with pytest.raises(ValueError, match="non-positive"):
            ops.convolve(x, w, stride=stride, zero_pad=pad)
        return
    y = ops.convolve(x, w, stride=stride, zero_pad=pad)
    assert y.shape == (1, 1, expected, (n + 1 + 2 * pad - k) // stride + 1)


def test_convolve_linearity(rng):
    x, y = rng.standard_normal((2, 2, 6, 6, 6)), rng.standard_normal((2, 2, 6, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    a, b = 1.7, -0.3
    lhs = ops.convolve(Tensor(a * x + b * y), w, stride=2, zero_pad=1).data
    rhs = a * ops.convolve(Tensor(x), w, stride=2, zero_pad=1).data + b * ops.convolve(
        Tensor(y), w, stride=2, zero_pad=1).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_convolve_rejects_mismatch_naming_both_shapes():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    w = Tensor(np.zeros((3, 4, 3, 3)))
    with pytest.raises(ValueError) as err:
        ops.convolve(x, w)
    assert "(1, 2, 5, 5)" in str(err.value) and "(3, 4, 3, 3)" in str(err.value)


def test_convolve_rejects_non_positive_extent():
    with pytest.raises(ValueError, match="non-positive"):
        ops.convolve(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------- transposed

def test_transposed_convolve_doubles_extent():
    x = Tensor(np.ones((1, 2, 4, 4, 4)))
    w = Tensor(np.ones((2, 3, 3, 3, 3)))
    assert ops.transposed_convolve(x, w).shape == (1, 3, 8, 8, 8)


@pytest.mark.parametrize("rank", [2, 3])
def test_transposed_convolve_is_adjoint(rng, rank):
    small = (1, 3) + (5,) * rank
    big = (1, 2) + (10,) * rank
    # conv kernel (out=3, in=2, k...) read as (C_in=3, C_out=2, k...) by the transposed op
    w = Tensor(rng.standard_normal((3, 2) + (3,) * rank))
    xb, ys = rng.standard_normal(big), rng.standard_normal(small)
    lhs = np.vdot(ops.convolve(Tensor(xb), w, stride=2, zero_pad=1).data, ys)
    rhs = np.vdot(xb, ops.transposed_convolve(Tensor(ys), w).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_transposed_convolve_zero_in_zero_out(rng):
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    assert not ops.transposed_convolve(Tensor(np.zeros((1, 2, 3, 3))), w).data.any()


def test_transposed_convolve_rejects_non_doubling():
    with pytest.raises(ValueError, match="double"):
        ops.transposed_convolve(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                                output_pad=0)


# ---------------------------------------------------------------- batch norm

def _bn_params(c, gamma=1.0, beta=0.0):
    return Tensor(np.full(c, gamma)), Tensor(np.full(c, beta))


def test_batch_norm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 3, 4, 4), 5.0))
    g, b = Tensor(np.array([2.0, 3.0, 4.0])), Tensor(np.array([0.5, -1.0, 7.0]))
    y = ops.batch_norm(x, g, b)
    np.testing.assert_array_equal(y.data, np.broadcast_to(b.data[None, :, None, None], x.shape))


def test_batch_norm_standardized_input_near_identity(rng):
    x = rng.standard_normal((4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = ops.batch_norm(Tensor(x), *_bn_params(2)).data
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-12, atol=1e-12)


def test_batch_norm_inference_hand_values():
    x = np.array([1.0, 2.0, 4.0]).reshape(1, 1, 3)
    stats = ops.RunningStats(np.array([2.0]), np.array([4.0]))
    y = ops.batch_norm(Tensor(x), Tensor(np.array([3.0])), Tensor(np.array([0.5])), stats,
                       training=False).data
    s = math.sqrt(4.0 + 1e-5)
    np.testing.assert_allclose(y.ravel(), [(1 - 2) / s * 3 + 0.5, 0.5, (4 - 2) / s * 3 + 0.5], rtol=1e-15)


def test_batch_norm_running_stats_update(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    stats = ops.RunningStats.fresh(2, np.float64)
    ops.batch_norm(Tensor(x), *_bn_params(2), stats)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats.mean, 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * v, rtol=1e-12)


def test_batch_norm_rejects_empty_batch():
    with pytest.raises(ValueError, match="non-empty"):
        ops.batch_norm(Tensor(np.zeros((0, 2, 3))), *_bn_params(2))


# ---------------------------------------------------------------- relu / softmax / concat

def test_relu_values_and_dead_region(rng):
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    x = Tensor(-np.abs(rng.standard_normal(10)) - 0.1, requires_grad=True)
    y = ops.relu(x)
    assert not y.data.any()
    y.sum().backward()
    assert not x.grad.any()


def test_relu_idempotent(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(ops.relu(ops.relu(x)).data, ops.relu(x).data)


def test_relu_gradient_zero_at_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    ops.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_softmax_hand_values():
    y = ops.softmax_along(Tensor(np.array([[0.0, math.log(3)]])), 1).data
    np.testing.assert_allclose(y, [[0.25, 0.75]], rtol=1e-15)
    np.testing.assert_allclose(ops.softmax_along(Tensor(np.full((1, 5), 3.3)), 1).data, 0.2, rtol=1e-15)


def test_softmax_normalized_and_overflow_safe(rng):
    x = rng.standard_normal((3, 7, 4)) * 50 + 800
    y = ops.softmax_along(Tensor(x), 1).data
    assert np.all(np.isfinite(y)) and np.all(y > 0) and np.all(y <= 1)
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-6


def test_concat_and_split_round_trip(rng):
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 5)))
    c = ops.concat([a, b], 1)
    assert c.shape == (2, 8)
    assert ops.concat([a], 1) is a
    parts = ops.split(c, [3, 5], 1)
    np.testing.assert_array_equal(ops.concat(parts, 1).data, c.data)


def test_concat_rejects_mismatch():
    with pytest.raises(ValueError, match="cannot concatenate"):
        ops.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], 1)


# ---------------------------------------------------------------- autodiff machinery

def test_gradients_accumulate_on_shared_leaf():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_parameter_gradient_shape():
    p = Parameter(np.zeros((2, 3)), "w")
    assert p.grad.shape == p.shape and p.requires_grad


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic_exact():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x).backward()
    assert x.grad[0] == 6.0
    h = 1e-5
    assert ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h) == pytest.approx(6.0, abs=1e-9)
    assert grad_check(lambda t: t * t, [Tensor(np.array([3.0]))], tolerance=1e-9).passed


def test_grad_check_convolve_passes(rng):
    x, w = Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3)))
    assert grad_check(lambda a, b: ops.convolve(a, b, zero_pad=1), [x, w], tolerance=1e-4).passed


def test_grad_check_catches_corrupted_backward(rng):
    def bad_square(t):
        return make_node(t.data ** 2, (t,), lambda g: (g * 2.2 * t.data,))

    rep = grad_check(bad_square, [Tensor(rng.standard_normal(5))], tolerance=1e-4)
    assert not rep.passed


def test_grad_check_catches_corrupted_relu_rule(rng):
    # pinned branch patterns must not hide a wrong backward rule
    def leaky_backward_relu(x):
        mask = ops.branch_mask(x.data > 0)
        return make_node(np.where(mask, x.data, 0), (x,), lambda g: (g * (mask + 0.1),))

    x = Tensor(rng.standard_normal((4, 4)))
    assert not grad_check(leaky_backward_relu, [x]).passed


def test_grad_check_reports_non_finite():
    with np.errstate(invalid="ignore"):
        rep = grad_check(lambda t: make_node(np.log(t.data), (t,), lambda g: (g / t.data,)),
                         [Tensor(np.array([1.0, -1.0]))])
    assert not rep.passed and "non-finite" in rep.failures[0]


def test_grad_check_requires_float64():
    with pytest.raises(TypeError, match="64-bit"):
        grad_check(lambda t: t * t, [Tensor(np.ones(2, dtype=np.float32))])
