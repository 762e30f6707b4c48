import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffcode.errors import ContractError, DimensionError, NonFiniteError
from diffcode.numerics import (
    Tape,
    Tensor,
    backward,
    channel_norm,
    clip,
    concat,
    conv2d,
    cross_entropy,
    exp,
    global_avg_pool,
    gradcheck,
    l1_loss,
    leaky_relu,
    linear,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mse_loss,
    read_tensor,
    sigmoid,
    softmax,
    sqrt,
    stack,
    stop_gradient,
    straight_through,
    tabs,
    tanh,
    tensor_bytes,
    upsample_nearest,
    write_tensor,
)

from oracles import conv2d_loops, matmul_loops, softmax_exact


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ---------------------------------------------------------------- conv2d

def test_conv_scalar_kernel():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(k), pad=1).data, x)


def test_conv_matches_loop_oracle(rng):
    x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k)).data, conv2d_loops(x, k), rtol=0, atol=1e-12)


@pytest.mark.parametrize("c,o,kk,stride,pad,groups", [
    (2, 3, 1, 1, 0, 1), (2, 3, 3, 1, 1, 1), (3, 2, 3, 2, 1, 1), (4, 4, 3, 1, 1, 4),
    (4, 6, 3, 2, 0, 2), (2, 2, 5, 2, 2, 1), (3, 3, 3, 2, 1, 3),
])
def test_conv_variants_match_oracle(rng, c, o, kk, stride, pad, groups):
    x, k, b = rng.normal(size=(2, c, 7, 6)), rng.normal(size=(o, c // groups, kk, kk)), rng.normal(size=o)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad, groups=groups).data
    np.testing.assert_allclose(got, conv2d_loops(x, k, b, stride, pad, groups), rtol=0, atol=1e-12)
    assert got.shape[2] == (7 + 2 * pad - kk) // stride + 1


@pytest.mark.parametrize("c,o,kk,stride,pad,groups", [
    (2, 3, 1, 1, 0, 1), (2, 3, 3, 1, 1, 1), (3, 2, 3, 2, 1, 1), (4, 4, 3, 1, 1, 4), (4, 6, 3, 2, 0, 2),
])
def test_conv_gradients(rng, c, o, kk, stride, pad, groups):
    x, k, b = leaf(rng, 2, c, 5, 5), leaf(rng, o, c // groups, kk, kk), leaf(rng, o)
    w = rng.normal(size=conv2d(x, k, b, stride, pad, groups).shape)
    gradcheck(lambda: (conv2d(x, k, b, stride, pad, groups) * w).sum(), [x, k, b])


def test_conv_contracts():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ContractError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ContractError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), pad=-1)
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- linear / matmul

def test_linear_identity_and_bias(rng):
    x = rng.normal(size=(4, 3))
    assert np.array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([1.0, -2.0])
    assert np.array_equal(linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).data, np.tile(b, (4, 1)))


def test_linear_matches_loops(rng):
    x, w = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w)).data, matmul_loops(x, w.T), atol=1e-12)
    np.testing.assert_allclose(matmul(Tensor(x), Tensor(w.T)).data, matmul_loops(x, w.T), atol=1e-12)


def test_linear_dimension_error():
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_linear_and_matmul_gradients(rng):
    x, w, b = leaf(rng, 3, 2, 4), leaf(rng, 5, 4), leaf(rng, 5)
    gradcheck(lambda: (linear(x, w, b) ** 2).sum(), [x, w, b])
    a, m = leaf(rng, 3, 4), leaf(rng, 4, 2)
    gradcheck(lambda: tanh(matmul(a, m)).sum(), [a, m])


# ---------------------------------------------------------------- softmax family

def test_softmax_examples():
    np.testing.assert_array_equal(softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    big = softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert abs(big[0] - 1.0) <= 1e-12 and big[1] <= 1e-12
    np.testing.assert_allclose(softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data,
                               softmax_exact([1.0, 2.0, 3.0]), rtol=1e-15, atol=0)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_simplex(v):
    p = softmax(Tensor(v), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_family_gradients(rng):
    v = leaf(rng, 3, 5, lo=-3, hi=3)
    w = rng.normal(size=(3, 5))
    gradcheck(lambda: (softmax(v) * w).sum(), [v])
    gradcheck(lambda: (log_softmax(v) * w).sum(), [v])
    gradcheck(lambda: logsumexp(v).sum(), [v])
    gradcheck(lambda: cross_entropy(v, np.array([0, 4, 2])), [v])


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.5, -1.0]])
    expected = -np.log(softmax_exact(logits[0])[0])
    assert abs(cross_entropy(Tensor(logits), np.array([0])).item() - expected) < 1e-12


# ---------------------------------------------------------------- backward and tape

def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x.grad = None
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_tape_order_and_single_visit(rng):
    x = leaf(rng, 3)
    y = x * x
    z = y + y  # diamond: y consumed twice
    loss = (z * x).sum()
    tape = Tape.from_output(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {i: p for p, i in enumerate(ids)}
    for node in tape.nodes:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    backward(loss)
    np.testing.assert_allclose(x.grad, 6 * x.data ** 2, rtol=1e-12)


def test_backward_deterministic(rng):
    x, k = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3)

    def run():
        x.grad = k.grad = None
        backward(tanh(conv2d(x, k, pad=1)).sum())
        return x.grad.copy(), k.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


# ---------------------------------------------------------------- elementwise and shape ops

@pytest.mark.parametrize("name,fn,lo", [
    ("exp", exp, -1), ("log", log, 0.5), ("sqrt", sqrt, 0.5), ("abs", tabs, 0.1), ("tanh", tanh, -1),
    ("sigmoid", sigmoid, -1), ("leaky_relu", lambda t: leaky_relu(t, 0.1), 0.1),
    ("clip", lambda t: clip(t, 0.2, 0.8), 0.25), ("pow", lambda t: t ** 3, -1),
])
def test_elementwise_gradients(rng, name, fn, lo):
    x = leaf(rng, 3, 4, lo=lo, hi=lo + 0.5)
    w = rng.normal(size=(3, 4))
    gradcheck(lambda: (fn(x) * w).sum(), [x])


def test_arithmetic_broadcast_gradients(rng):
    a, b, c = leaf(rng, 3, 4), leaf(rng, 1, 4), leaf(rng, 3, 1, lo=0.5, hi=1.5)
    gradcheck(lambda: ((a - b) * a / c + 2.0 - b).sum(), [a, b, c])


def test_shape_op_gradients(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 6))
    gradcheck(lambda: (concat([a, b], axis=1).transpose(2, 0, 1) * w).sum(), [a, b])
    gradcheck(lambda: (stack([a, b], axis=0)[1, :, 1:] ** 2).mean(), [a, b])
    gradcheck(lambda: a.reshape(6, 4)[np.array([0, 0, 5])].sum(), [a])
    gradcheck(lambda: (a.mean(axis=(0, 2), keepdims=True) * b).sum(), [a, b])


def test_image_op_gradients(rng):
    x = leaf(rng, 2, 3, 4, 4)
    w = rng.normal(size=(2, 3, 8, 8))
    gradcheck(lambda: (upsample_nearest(x, 2) * w).sum(), [x])
    gradcheck(lambda: (channel_norm(x) * w[:, :, :4, :4]).sum(), [x])
    gradcheck(lambda: (global_avg_pool(x) ** 2).sum(), [x])


def test_losses(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    assert l1_loss(Tensor(np.array([1.0, 1.0])), Tensor(np.array([0.0, 2.0]))).item() == 1.0
    gradcheck(lambda: mse_loss(a, b), [a, b])
    gradcheck(lambda: l1_loss(a, b), [a, b])


# ---------------------------------------------------------------- stop-gradient and straight-through

def test_stop_gradient_examples(rng):
    x, y = leaf(rng, 4), leaf(rng, 4)
    assert np.array_equal(stop_gradient(x).data, x.data)
    backward((stop_gradient(x) * y).sum())
    assert x.grad is None or not np.any(x.grad)
    np.testing.assert_array_equal(y.grad, x.data)


def test_straight_through(rng):
    z, zq = leaf(rng, 5), leaf(rng, 5)
    out = straight_through(z, zq)
    assert np.array_equal(out.data, zq.data)
    w = rng.normal(size=5)
    backward((out * w).sum())
    np.testing.assert_array_equal(z.grad, w)
    assert zq.grad is None or not np.any(zq.grad)


# ---------------------------------------------------------------- tensor file

@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_file_roundtrip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"DFT1"
    assert raw == tensor_bytes(arr)
    back = read_tensor(io.BytesIO(raw)).data
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
