"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when any input
requires a gradient; ``backward(tape, loss)`` replays them in reverse order.
Besides the per-vector operators, the ``segment_*`` family reduces variable
length lists packed into one array (row ``i`` belongs to list ``seg[i]``), so a
whole episode runs as a handful of array ops.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.01

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self._ids: set[int] = set()
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids


def _tape() -> Tape | None:
    return getattr(_state, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _record(op: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap ``out``; record ``backward_fn(grad_out) -> grads per input`` if needed."""
    _finite(out, op)
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out)
    tape = _tape()
    if needs and tape is not None:
        res.requires_grad = True
        tape.records.append((res, inputs, backward_fn))
        tape._ids.add(id(res))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def scatter_add(idx: np.ndarray, vals: np.ndarray, num: int) -> np.ndarray:
    """``out[idx[i]] += vals[i]`` accumulated in ascending ``i`` within each target row."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num,) + vals.shape[1:])
    if len(idx) == 0:
        return out
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=num).astype(np.float64)
    if np.any(idx[1:] < idx[:-1]):
        order = np.argsort(idx, kind="stable")
        idx, vals = idx[order], vals[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(vals, starts, axis=0)
    return out


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _record("leaky_relu", np.where(pos, a.value, slope * a.value), (a,), lambda g: (np.where(pos, g, slope * g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _record("relu", np.where(pos, a.value, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped to ``[eps, inf)``."""
    a = as_tensor(a)
    x = a.value
    if eps > 0:
        clamped = x < eps
        xc = np.where(clamped, eps, x)
        return _record("log", np.log(xc), (a,), lambda g: (np.where(clamped, 0.0, g / xc),))
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _record("log", y, (a,), lambda g: (g / x,))


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), back)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in ts)
    vals = [t.value for t in ts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]} on axis {axis}") from None
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather(a, idx) -> Tensor:
    """Rows ``a[idx]`` (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    perm = (idx.ndim == 1 and len(idx) == shape[0]
            and np.array_equal(np.bincount(idx, minlength=shape[0]), np.ones(shape[0])))

    def back(g):
        if perm:
            out = np.empty(shape)
            out[idx] = g
            return (out,)
        return (scatter_add(idx, g, shape[0]),)

    return _record("gather", a.value[idx], (a,), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", a.value.T.copy(), (a,), lambda g: (g.T.copy(),))


def edge_aggregate(w, x, recv, send, num: int) -> Tensor:
    """``out[r] = sum(w[e] * x[send[e]] for e with recv[e] == r)``.

    ``w`` holds one weight per edge (a tensor or a constant array).  Sums run
    over edges in their given order within each receiver.
    """
    w, x = as_tensor(w), as_tensor(x)
    recv = np.asarray(recv, dtype=np.int64)
    send = np.asarray(send, dtype=np.int64)
    if not (w.value.shape == recv.shape == send.shape):
        raise ShapeError(f"edge_aggregate: {w.shape} weights for {recv.shape[0]} edges")
    if x.value.ndim != 2:
        raise ShapeError(f"edge_aggregate: features must be a matrix, got {x.shape}")
    order = None
    if np.any(recv[1:] < recv[:-1]):
        order = np.argsort(recv, kind="stable")
    r = recv if order is None else recv[order]
    s = send if order is None else send[order]
    wv = w.value if order is None else w.value[order]
    indptr = np.searchsorted(r, np.arange(num + 1))
    M = sp.csr_matrix((wv, s, indptr), shape=(num, x.shape[0]))
    xv = x.value

    def back(g):
        gw = np.einsum("ij,ij->i", g[recv], xv[send])
        return gw, np.asarray(M.T @ g)

    return _record("edge_aggregate", np.asarray(M @ xv), (w, x), back)


# -- reductions --------------------------------------------------------------


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.asarray(a.value.sum(axis=axis)), (a,), back)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def reduce_max(a, axis: int = 0) -> Tensor:
    """Max over ``axis``; the gradient routes to the first argmax only."""
    a = as_tensor(a)
    arg = np.argmax(a.value, axis=axis)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _record("max", np.max(a.value, axis=axis), (a,), back)


def stack_sum(ts: Sequence) -> Tensor:
    """Sum of a list of equal-shape vectors."""
    return reduce_sum(concat([reshape(t, (1, -1)) for t in ts], axis=0), axis=0)


def stack_mean(ts: Sequence) -> Tensor:
    return reduce_mean(concat([reshape(t, (1, -1)) for t in ts], axis=0), axis=0)


def stack_max(ts: Sequence) -> Tensor:
    return reduce_max(concat([reshape(t, (1, -1)) for t in ts], axis=0), axis=0)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record("log_softmax", y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def squared_euclidean(a, b) -> Tensor:
    """``||a - b||^2`` for vectors; for matrices, the pairwise ``(n_a, n_b)`` table."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-1] or av.ndim != bv.ndim:
        raise ShapeError(f"squared_euclidean: incompatible shapes {av.shape} and {bv.shape}")
    if av.ndim == 1:
        d = av - bv
        return _record("sqeuclid", np.asarray(d @ d), (a, b), lambda g: (2 * g * d, -2 * g * d))
    diff = av[:, None, :] - bv[None, :, :]
    out = (diff * diff).sum(-1)

    def back(g):
        gd = 2 * g[:, :, None] * diff
        return gd.sum(1), -gd.sum(0)

    return _record("sqeuclid", out, (a, b), back)


# -- segment (ragged list) reductions -----------------------------------------


def _check_seg(a: np.ndarray, seg: np.ndarray, op: str) -> None:
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"{op}: {a.shape[0]} rows but {seg.shape[0]} segment ids")


def segment_sum(a, seg, num: int) -> Tensor:
    """``out[s] = sum(a[i] for i with seg[i] == s)``; empty segments give 0."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    _check_seg(a.value, seg, "segment_sum")
    out = scatter_add(seg, a.value, num)
    return _record("segment_sum", out, (a,), lambda g: (g[seg],))


def segment_mean(a, seg, num: int) -> Tensor:
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    cnt = np.bincount(seg, minlength=num).astype(np.float64)
    inv = 1.0 / np.maximum(cnt, 1.0)
    inv = inv.reshape((num,) + (1,) * (a.value.ndim - 1))
    return mul(segment_sum(a, seg, num), inv)


def segment_max(a, seg, num: int) -> Tensor:
    """Per-segment, per-column max; gradient goes to the first argmax row."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    _check_seg(a.value, seg, "segment_max")
    x = a.value
    out = np.full((num,) + x.shape[1:], -np.inf)
    np.maximum.at(out, seg, x)
    rows = np.arange(len(x)).reshape((-1,) + (1,) * (x.ndim - 1))
    cand = np.where(x == out[seg], rows, len(x))
    first = np.full(out.shape, len(x))
    np.minimum.at(first, seg, cand)
    empty = first == len(x)
    out = np.where(empty, 0.0, out)

    def back(g):
        gx = np.zeros_like(x)
        hit = first[seg] == rows
        gx[hit] = np.broadcast_to(g[seg], x.shape)[hit]
        return (gx,)

    return _record("segment_max", out, (a,), back)


def segment_softmax(a, seg, num: int) -> Tensor:
    """Softmax of a 1-D array within each segment."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    _check_seg(a.value, seg, "segment_softmax")
    x = a.value
    mx = np.full(num, -np.inf)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    s = scatter_add(seg, e, num)
    y = e / s[seg]

    def back(g):
        gy = scatter_add(seg, g * y, num)
        return (y * (g - gy[seg]),)

    return _record("segment_softmax", y, (a,), back)


# -- backward ----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf on the tape."""
    if tape.consumed:
        raise BackwardError("tape already consumed by a previous backward()")
    if loss.value.size != 1:
        raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise BackwardError("loss is detached from the tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if not t.requires_grad or gi is None:
                continue
            if id(t) in tape._ids:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                t.grad = t.grad + gi
