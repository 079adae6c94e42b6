"""Differentiable primitives.

Every op takes :class:`Tensor` inputs (raw arrays are lifted to constants
of the first tensor's graph) and returns a new Tensor recorded on that
graph.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "conv2d", "conv3d", "relu",
    "sigmoid", "tanh", "exp", "log", "softplus", "log_sigmoid", "square",
    "minimum", "softmax", "sum", "mean", "concat", "slice", "reshape",
    "transpose", "take", "index_update", "sparse_matmul", "upsample_nearest",
    "stop_gradient", "straight_through",
]


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _lift(g, *xs):
    return [g.lift(x) for x in xs]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return g.record("add", (a, b), a.data + b.data,
                    lambda go: (_unbroadcast(go, sa), _unbroadcast(go, sb)))


def sub(a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return g.record("sub", (a, b), a.data - b.data,
                    lambda go: (_unbroadcast(go, sa), _unbroadcast(-go, sb)))


def mul(a, b):
    """Elementwise product with broadcasting (also used for mask application)."""
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return g.record("mul", (a, b), ad * bd,
                    lambda go: (_unbroadcast(go * bd, ad.shape),
                                _unbroadcast(go * ad, bd.shape)))


def div(a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return g.record("div", (a, b), out,
                    lambda go: (_unbroadcast(go / bd, ad.shape),
                                _unbroadcast(-go * out / bd, bd.shape)))


def neg(a):
    return a.graph.record("neg", (a,), -a.data, lambda go: (-go,))


def square(a):
    ad = a.data
    return a.graph.record("square", (a,), ad * ad, lambda go: (2.0 * go * ad,))


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to ``a``."""
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return g.record("minimum", (a, b), np.where(pick_a, a.data, b.data),
                    lambda go: (_unbroadcast(np.where(pick_a, go, 0.0), a.shape),
                                _unbroadcast(np.where(pick_a, 0.0, go), b.shape)))


# --------------------------------------------------------------------------
# nonlinearities

def relu(a):
    mask = a.data > 0
    return a.graph.record("relu", (a,), np.where(mask, a.data, 0.0),
                          lambda go: (go * mask,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)
    return a.graph.record("sigmoid", (a,), s, lambda go: (go * s * (1.0 - s),))


def log_sigmoid(a):
    """log(sigmoid(x)) computed without cancellation."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return a.graph.record("log_sigmoid", (a,), out, lambda go: (go * (1.0 - s),))


def softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return a.graph.record("softplus", (a,), out, lambda go: (go * s,))


def tanh(a):
    t = np.tanh(a.data)
    return a.graph.record("tanh", (a,), t, lambda go: (go * (1.0 - t * t),))


def cos(a):
    x = a.data
    return a.graph.record("cos", (a,), np.cos(x), lambda go: (-go * np.sin(x),))


def exp(a):
    e = np.exp(a.data)
    return a.graph.record("exp", (a,), e, lambda go: (go * e,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return a.graph.record("log", (a,), np.log(x), lambda go: (go / x,))


def softmax(a, axis=0):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(go):
        return (s * (go - (go * s).sum(axis=axis, keepdims=True)),)

    return a.graph.record("softmax", (a,), s, vjp)


# --------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go, shape).copy(),)

    return a.graph.record("sum", (a,), np.asarray(out), vjp)


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go / n, shape).copy(),)

    return a.graph.record("mean", (a,), np.asarray(out), vjp)


def concat(tensors, axis=0):
    g = _graph_of(*tensors)
    tensors = _lift(g, *tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shape mismatch {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return g.record("concat", tensors, out,
                    lambda go: tuple(np.split(go, splits, axis=axis)))


def slice(a, index):
    """Basic or integer-array indexing ``a[index]``."""
    shape = a.shape
    out = a.data[index]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def vjp(go):
        grad = np.zeros(shape)
        if fancy:
            np.add.at(grad, index, go)
        else:
            grad[index] += go
        return (grad,)

    return a.graph.record("slice", (a,), np.array(out), vjp)


def reshape(a, shape):
    src = a.shape
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise ValueError(f"reshape: cannot view {src} as {shape}")
    return a.graph.record("reshape", (a,), out, lambda go: (go.reshape(src),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.graph.record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                          lambda go: (go.transpose(inv),))


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(go):
        grad = np.zeros(shape)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(go, axis, 0))
        return (grad,)

    return a.graph.record("take", (a,), np.take(a.data, indices, axis=axis), vjp)


def index_update(base, indices, values):
    """Copy of ``base`` with rows ``indices`` (axis 0, unique) replaced."""
    g = _graph_of(base, values)
    base, values = _lift(g, base, values)
    indices = np.asarray(indices, dtype=np.intp)
    if len(np.unique(indices)) != len(indices):
        raise ValueError("index_update: indices must be unique")
    if values.shape != (len(indices),) + base.shape[1:]:
        raise ValueError(f"index_update: shape mismatch {base.shape} vs {values.shape}")
    out = base.data.copy()
    out[indices] = values.data

    def vjp(go):
        gb = go.copy()
        gb[indices] = 0.0
        return gb, go[indices]

    return g.record("index_update", (base, values), out, vjp)


def matmul(a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return g.record("matmul", (a, b), ad @ bd, lambda go: (go @ bd.T, ad.T @ go))


def sparse_matmul(matrix, x):
    """``matrix @ x`` for a constant scipy sparse ``matrix`` and 2-D ``x``."""
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul: shape mismatch {matrix.shape} vs {x.shape}")
    mt = matrix.T.tocsr()
    return x.graph.record("sparse_matmul", (x,), np.asarray(matrix @ x.data),
                          lambda go: (np.asarray(mt @ go),))


def stop_gradient(a):
    return a.graph.constant(a.data)


def straight_through(surrogate, value):
    """Forward ``value``, backward as if the output were ``surrogate``."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != surrogate.shape:
        raise ValueError(f"straight_through: shape mismatch {surrogate.shape} vs {value.shape}")
    return surrogate.graph.record("straight_through", (surrogate,), value, lambda go: (go,))


# --------------------------------------------------------------------------
# convolutions

def _conv_nd(kind, x, w, b, stride, nsp):
    """Direct convolution, zero padding k//2, cross-correlation convention.

    x: [N, C, *S], w: [O, C, *K] with odd K.
    """
    if x.ndim != nsp + 2 or w.ndim != nsp + 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"{kind}: shape mismatch {x.shape} vs {w.shape}")
    ks = w.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"{kind}: even kernel size {ks} not supported")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"{kind}: shape mismatch {w.shape} vs bias {b.shape}")
    n, c = x.shape[:2]
    o = w.shape[0]
    spatial = x.shape[2:]
    pads = [k // 2 for k in ks]
    out_sp = tuple((s + 2 * p - k) // stride + 1 for s, p, k in zip(spatial, pads, ks))
    xd, wd = x.data, w.data
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    m = n * int(np.prod(out_sp))
    kk = int(np.prod(ks))
    sp_axes = tuple(range(2, 2 + nsp))
    # im2col: [n, c, *out, *k] -> [c, *k, n, *out] -> [c*K, m]
    win = sliding_window_view(xp, ks, axis=sp_axes)[(np.s_[:], np.s_[:]) + (np.s_[::stride],) * nsp]
    perm = (1,) + tuple(range(2 + nsp, 2 + 2 * nsp)) + (0,) + sp_axes
    col = np.ascontiguousarray(win.transpose(perm)).reshape(c * kk, m)
    wmat = wd.reshape(o, c * kk)
    out = wmat @ col
    if b is not None:
        out += b.data[:, None]
    value = np.moveaxis(out.reshape((o, n) + out_sp), 0, 1)
    offsets = list(itertools.product(*[range(k) for k in ks]))

    def window(off):
        return (np.s_[:], np.s_[:]) + tuple(
            np.s_[d:d + stride * (out_sp[i] - 1) + 1:stride] for i, d in enumerate(off))

    def vjp(go):
        gflat = np.moveaxis(go, 1, 0).reshape(o, m)
        gw = (gflat @ col.T).reshape(wd.shape)
        gcol = (wmat.T @ gflat).reshape((c, kk, n) + out_sp)
        gxp = np.zeros_like(xp)
        for j, off in enumerate(offsets):
            gxp[window(off)] += np.moveaxis(gcol[:, j], 0, 1)
        gx = gxp[(np.s_[:], np.s_[:]) + tuple(np.s_[p:p + s] for p, s in zip(pads, spatial))]
        grads = [gx, gw]
        if b is not None:
            grads.append(gflat.sum(axis=1))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return x.graph.record(kind, inputs, value, vjp)


def _conv(kind, x, w, b, stride, nsp):
    g = _graph_of(x, w)
    x, w = _lift(g, x, w)
    if b is not None:
        b = g.lift(b)
    batched = x.ndim == nsp + 2
    if not batched:
        if x.ndim != nsp + 1:
            raise ValueError(f"{kind}: shape mismatch {x.shape} vs {w.shape}")
        x = reshape(x, (1,) + x.shape)
    out = _conv_nd(kind, x, w, b, stride, nsp)
    return out if batched else reshape(out, out.shape[1:])


def conv2d(x, w, b=None, stride=1):
    """2-D conv on [C, H, W] or [N, C, H, W] inputs."""
    return _conv("conv2d", x, w, b, stride, 2)


def conv3d(x, w, b=None, stride=1):
    """3-D conv on [C, X, Y, Z] or [N, C, X, Y, Z] inputs."""
    return _conv("conv3d", x, w, b, stride, 3)


def upsample_nearest(a, out_spatial):
    """Nearest-neighbour resize of the trailing spatial axes of [C, *S]."""
    spatial = a.shape[1:]
    idx = [np.minimum((np.arange(t) * s) // t, s - 1) for s, t in zip(spatial, out_spatial)]
    grid = np.ix_(*idx)
    out = a.data[(np.s_[:],) + grid]

    def vjp(go):
        grad = np.zeros(a.shape)
        np.add.at(grad, (np.s_[:],) + grid, go)
        return (grad,)

    return a.graph.record("upsample_nearest", (a,), out, vjp)
