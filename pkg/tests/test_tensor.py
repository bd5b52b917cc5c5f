"""Autodiff core: values against independent references, graph discipline."""

import numpy as np
import pytest
from scipy import signal

from depthfill import tensor as T
from depthfill.errors import NumericError, UsageError
from depthfill.rng import stream
from depthfill.tensor import Tensor


def test_add_requires_matching_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(UsageError):
        a + b


def test_mul_scalar_ok_but_implicit_broadcast_rejected():
    a = Tensor(np.ones((2, 3)))
    assert (a * 2.0).data.tolist() == [[2, 2, 2], [2, 2, 2]]
    with pytest.raises(UsageError):
        a * Tensor(np.ones(3))


def test_explicit_broadcast_then_add():
    a = Tensor(np.arange(3.0).reshape(3, 1), requires_grad=True)
    b = Tensor(np.ones((3, 4)))
    out = (a.broadcast_to((3, 4)) + b).sum()
    out.backward()
    assert np.array_equal(a.grad, np.full((3, 1), 4.0))


def test_numpy_defers_to_tensor_arithmetic():
    # ndarray.__add__ must yield a graph node, not an object array
    out = np.full((2, 2), 3.0) + Tensor(np.ones((2, 2)), requires_grad=True)
    assert isinstance(out, Tensor)
    assert out.data.dtype == np.float64 and out.data[0, 0] == 4.0


def test_diamond_graph_accumulates_gradient():
    # f(x) = x*x + x*x: df/dx = 4x through two paths sharing one node
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    out = (y + y).sum()
    out.backward()
    assert x.grad[0] == pytest.approx(12.0, abs=1e-12)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_free_graph_blocks_second_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.free_graph()
    with pytest.raises(UsageError):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert y._vjp is None and y._parents == ()


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_nonfinite_intermediate_raises():
    x = Tensor(np.array([1e3]))
    with pytest.raises(NumericError):
        x.exp()


def test_default_dtype_switch():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor(np.zeros(2)).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor(np.zeros(2)).data.dtype == np.float64


def test_detach_cuts_the_graph():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = (x * 3.0).detach()
    assert not y.requires_grad
    out = (x * x).sum() + (y * y).sum()
    out.backward()
    assert x.grad[0] == pytest.approx(4.0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_scipy(stride, padding):
    rng = stream(0, "conv-oracle", stride, padding)
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    for n in range(2):
        for f in range(4):
            acc = np.zeros_like(xp[0, 0])
            for c in range(3):
                acc += signal.correlate2d(xp[n, c], w[f, c], mode="same",
                                          boundary="fill")
            # correlate2d 'same' centers the kernel; crop to 'valid' grid
            full = sum(signal.correlate2d(xp[n, c], w[f, c], mode="valid")
                       for c in range(3))
            ref = full[::stride, ::stride]
            assert np.allclose(out[n, f], ref, atol=1e-12)


def test_conv_transpose_is_conv_adjoint():
    # <conv(x, k), y> == <x, conv_transpose(y, k)> for all x, y
    rng = stream(0, "adjoint")
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 2, 2))
    y = rng.standard_normal((1, 3, 3, 3))
    lhs = float(np.sum(T.conv2d(Tensor(x), Tensor(k), stride=2).data * y))
    rhs = float(np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(k.transpose(0, 1, 2, 3)),
                                              stride=2).data))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_bilinear_sample_four_corner_oracle():
    rng = stream(0, "bilinear-oracle")
    feat = rng.standard_normal((2, 5, 6))
    coords = np.array([[1.3, 2.7], [0.0, 0.0], [4.99, 3.01]])
    out = T.bilinear_sample(Tensor(feat), Tensor(coords)).data
    for p, (xc, yc) in enumerate(coords):
        x0, y0 = int(np.floor(xc)), int(np.floor(yc))
        x0, y0 = min(max(x0, 0), 4), min(max(y0, 0), 3)
        fx, fy = xc - x0, yc - y0
        ref = (feat[:, y0, x0] * (1 - fx) * (1 - fy)
               + feat[:, y0, x0 + 1] * fx * (1 - fy)
               + feat[:, y0 + 1, x0] * (1 - fx) * fy
               + feat[:, y0 + 1, x0 + 1] * fx * fy)
        assert np.allclose(out[p], ref, atol=1e-12)


def test_bilinear_sample_clamps_outside_coords():
    feat = Tensor(np.arange(12.0).reshape(1, 3, 4))
    out = T.bilinear_sample(feat, Tensor(np.array([[-5.0, -5.0], [100.0, 100.0]])))
    assert out.data[0, 0] == 0.0          # top-left value
    assert out.data[1, 0] == 11.0         # bottom-right value


def test_softmax_matches_direct_normalization():
    rng = stream(0, "softmax-oracle")
    x = rng.standard_normal((4, 7))
    got = T.softmax(Tensor(x), axis=1).data
    ref = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    assert np.allclose(got, ref, atol=1e-12)
    assert np.allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_group_norm_standardizes_groups():
    rng = stream(0, "gn-oracle")
    x = rng.standard_normal((2, 6, 4, 4)) * 3.0 + 1.5
    out = T.group_norm(Tensor(x), groups=3).data
    grouped = out.reshape(2, 3, 2 * 4 * 4)
    assert np.allclose(grouped.mean(axis=2), 0.0, atol=1e-10)
    assert np.allclose(grouped.var(axis=2), 1.0, atol=1e-3)


def test_matmul_grad_matches_closed_form():
    rng = stream(0, "matmul")
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    (a @ b).sum().backward()
    g = np.ones((3, 2))
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    out = T.concat([a, b], axis=1)
    (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    assert np.array_equal(a.grad, [[0, 1], [5, 6]])
    assert np.array_equal(b.grad, [[2, 3, 4], [7, 8, 9]])
