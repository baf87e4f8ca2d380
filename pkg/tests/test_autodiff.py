import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metags import autodiff as ad
from metags.autodiff import BackwardError, NonFiniteError, ShapeError, Tape, Tensor, backward


def grad_of(fn, *values):
    """Tape gradients of scalar ``fn(*tensors)`` with respect to each input."""
    ts = [Tensor(np.array(v, dtype=float), requires_grad=True) for v in values]
    with Tape() as tape:
        out = fn(*ts)
    backward(tape, out)
    return [t.grad for t in ts], float(out.value)


def numeric_grad(fn, *values, h=1e-6):
    out = []
    for k, v in enumerate(values):
        v = np.array(v, dtype=float)
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus, minus = [np.array(x, dtype=float) for x in values], [np.array(x, dtype=float) for x in values]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (float(fn(*map(Tensor, plus)).value) - float(fn(*map(Tensor, minus)).value)) / (2 * h)
        out.append(g)
    return out


def test_examples():
    np.testing.assert_array_equal(ad.softmax(np.zeros(2)).value, [0.5, 0.5])
    assert float(ad.leaky_relu(np.array(-1.0)).value) == pytest.approx(-0.01, abs=1e-18)
    assert float(ad.squared_euclidean(np.array([1.0, 2.0]), np.array([1.0, 2.0])).value) == 0.0


def test_sum_and_sqeuclid_grads():
    (g,), _ = grad_of(lambda t: ad.reduce_sum(t), [0.3, -2.0, 5.0])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])
    c = np.array([0.5, -1.0, 2.0])
    theta = np.array([1.5, 2.0, -3.0])
    (g,), _ = grad_of(lambda t: ad.squared_euclidean(t, c), theta)
    np.testing.assert_allclose(g, 2 * (theta - c), rtol=0, atol=1e-15)


def test_backward_errors():
    t = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        v = ad.scale(t, 2.0)
        s = ad.reduce_sum(v)
    with pytest.raises(BackwardError, match="scalar"):
        backward(tape, v)
    backward(tape, s)
    with pytest.raises(BackwardError, match="consumed"):
        backward(tape, s)
    with Tape() as other:
        ad.reduce_sum(t)
    with pytest.raises(BackwardError, match="detached"):
        backward(other, s)


def test_fan_out_accumulates():
    (g,), _ = grad_of(lambda t: ad.reduce_sum(ad.mul(t, t)), [1.0, -2.0])
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_shape_and_finiteness_errors():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(NonFiniteError):
        ad.log(np.array([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(np.array([1000.0]))


def test_log_clamp():
    assert float(ad.log(np.array(0.0), eps=1e-12).value) == pytest.approx(np.log(1e-12))


def test_max_routes_to_argmax():
    x = np.array([[1.0, 5.0], [3.0, 2.0], [3.0, 0.0]])
    (g,), _ = grad_of(lambda t: ad.reduce_sum(ad.mul(ad.reduce_max(t, 0), np.array([2.0, 7.0]))), x)
    np.testing.assert_array_equal(g, [[0, 7], [2, 0], [0, 0]])
    assert g.sum() == 9.0
    vs = [np.array([1.0, 4.0]), np.array([2.0, 3.0])]
    gs, val = grad_of(lambda a, b: ad.reduce_sum(ad.stack_max([a, b])), *vs)
    assert val == 6.0
    np.testing.assert_array_equal(gs[0], [0, 1])
    np.testing.assert_array_equal(gs[1], [1, 0])


def test_segment_max_routes():
    x = np.array([[1.0], [4.0], [4.0], [2.0]])
    seg = np.array([0, 0, 0, 1])
    (g,), _ = grad_of(lambda t: ad.reduce_sum(ad.segment_max(t, seg, 3)), x)
    np.testing.assert_array_equal(g.ravel(), [0, 1, 0, 1])


OPS = {
    "matmul": (lambda a, b: ad.reduce_sum(ad.tanh(ad.matmul(a, b))), [(3, 4), (4, 2)]),
    "concat": (lambda a, b: ad.reduce_sum(ad.mul(ad.concat([a, b], axis=1), np.arange(5.0))), [(2, 3), (2, 2)]),
    "softmax": (lambda a: ad.reduce_sum(ad.mul(ad.softmax(a, axis=1), np.arange(6.0).reshape(2, 3))), [(2, 3)]),
    "log_softmax": (lambda a: ad.reduce_sum(ad.mul(ad.log_softmax(a), np.arange(4.0))), [(4,)]),
    "sqeuclid_mat": (lambda a, b: ad.reduce_sum(ad.squared_euclidean(a, b)), [(3, 2), (4, 2)]),
    "gather": (lambda a: ad.reduce_sum(ad.tanh(ad.gather(a, [2, 0, 2, 1]))), [(3, 2)]),
    "gather_perm": (lambda a: ad.reduce_sum(ad.mul(ad.gather(a, [2, 0, 1]), np.arange(6.0).reshape(3, 2))), [(3, 2)]),
    "transpose": (lambda a: ad.reduce_sum(ad.mul(ad.transpose(a), np.arange(6.0).reshape(3, 2))), [(2, 3)]),
    "segment_softmax": (lambda a: ad.reduce_sum(ad.mul(ad.segment_softmax(a, [1, 0, 1, 1, 0], 3), np.arange(5.0))), [(5,)]),
    "segment_mean": (lambda a: ad.reduce_sum(ad.tanh(ad.segment_mean(a, [0, 2, 2], 3))), [(3, 2)]),
    "edge_aggregate": (lambda w, x: ad.reduce_sum(ad.tanh(ad.edge_aggregate(w, x, [1, 0, 1], [0, 2, 2], 3))), [(3,), (3, 2)]),
    "mean": (lambda a: ad.reduce_mean(ad.tanh(a)), [(2, 3)]),
    "sub_neg_scale": (lambda a, b: ad.reduce_sum(ad.tanh(ad.scale(ad.neg(ad.sub(a, b)), 3.0))), [(3,), (3,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    vals = [rng.normal(size=s) for s in shapes]
    tape_g, _ = grad_of(fn, *vals)
    for a, b in zip(tape_g, numeric_grad(fn, *vals)):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-8)


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=50)
@given(arrays(float, 4, elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(x, a, b):
    f = lambda t: ad.reduce_sum(ad.tanh(t))
    g = lambda t: ad.reduce_sum(ad.mul(t, t))
    (gf,), _ = grad_of(f, x)
    (gg,), _ = grad_of(g, x)
    (gc,), _ = grad_of(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), x)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(arrays(float, (3, 4), elements=finite))
def test_softmax_normalized(x):
    np.testing.assert_allclose(ad.softmax(x, axis=1).value.sum(1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(0, 10**6))
def test_scatter_add_matches_loop(idx, seed):
    vals = np.random.default_rng(seed).normal(size=(len(idx), 2))
    ref = np.zeros((4, 2))
    for i, k in enumerate(idx):
        ref[k] += vals[i]
    np.testing.assert_allclose(ad.scatter_add(np.array(idx), vals, 4), ref, rtol=0, atol=1e-12)
