"""Differentiable primitives.

Each primitive computes its value with numpy and, when a graph is active and
some input requires a gradient, records a closure that maps the output
gradient to input gradients. No general broadcasting: binary ops take equal
shapes, scalars go through :func:`scale` / :func:`add_scalar`.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .tensor import Tensor, active_graph


def _out(values, like):
    return Tensor(values, dtype=like.values.dtype)


def _record(name, inputs, out, backward, kink=math.inf):
    graph = active_graph()
    if graph is None:
        return out
    return graph.record(name, inputs, out, backward, kink)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(op, a.shape, b.shape)


# --- elementwise ----------------------------------------------------------

def add(a, b):
    _same_shape("add", a, b)
    out = _out(a.values + b.values, a)
    return _record("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    out = _out(a.values - b.values, a)
    return _record("sub", (a, b), out, lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    out = _out(av * bv, a)
    return _record("mul", (a, b), out, lambda g: (g * bv, g * av))


def scale(a, c):
    c = a.values.dtype.type(c)
    out = _out(a.values * c, a)
    return _record("scale", (a,), out, lambda g: (g * c,))


def add_scalar(a, c):
    out = _out(a.values + a.values.dtype.type(c), a)
    return _record("add_scalar", (a,), out, lambda g: (g,))


def square(a):
    av = a.values
    out = _out(av * av, a)
    return _record("square", (a,), out, lambda g: (2 * g * av,))


def sqrt(a, eps=0.0):
    """sqrt(a + eps); eps keeps the derivative finite at zero."""
    root = np.sqrt(a.values + a.values.dtype.type(eps))
    out = _out(root, a)
    return _record("sqrt", (a,), out, lambda g: (g / (2 * root),))


def relu(a):
    av = a.values
    mask = av > 0
    out = _out(np.maximum(av, 0), a)
    kink = float(np.abs(av).min()) if av.size else math.inf
    return _record("relu", (a,), out, lambda g: (g * mask,), kink)


# --- shape / indexing -----------------------------------------------------

def reshape(a, shape):
    old = a.shape
    out = _out(a.values.reshape(shape), a)
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def take_rows(a, index):
    """Gather rows along axis 0 (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    out = _out(a.values[index], a)

    def backward(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, index, g)
        return (grad,)

    return _record("take_rows", (a,), out, backward)


def take(a, flat_index):
    """Gather individual elements by row-major flat index."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    out = _out(a.values.reshape(-1)[flat_index], a)

    def backward(g):
        grad = np.zeros(a.size, dtype=a.values.dtype)
        np.add.at(grad, flat_index, g)
        return (grad.reshape(a.shape),)

    return _record("take", (a,), out, backward)


def concat_rows(tensors):
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ShapeMismatch("concat_rows", tensors[0].shape, t.shape)
    sizes = [t.shape[0] for t in tensors]
    out = _out(np.concatenate([t.values for t in tensors], axis=0), tensors[0])
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record("concat_rows", tuple(tensors), out, backward)


# --- reductions -----------------------------------------------------------

def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a, axis=None):  # noqa: A001
    shape = a.shape
    out = _out(np.sum(a.values, axis=axis), a)
    return _record("sum", (a,), out, lambda g: (_expand(g, shape, axis).copy(),))


def mean(a, axis=None):
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    out = _out(np.mean(a.values, axis=axis), a)
    return _record("mean", (a,), out, lambda g: (_expand(g, shape, axis) / count,))


def _extremum(name, a, axis, pick):
    av = a.values
    if axis is None:
        flat = av.reshape(1, -1)
    else:
        flat = np.moveaxis(av, axis, -1)
        flat = flat.reshape(-1, flat.shape[-1])
    idx = pick(flat, axis=1)  # numpy argmax/argmin return the lowest index on ties
    vals = flat[np.arange(flat.shape[0]), idx]
    kink = math.inf
    if flat.shape[1] > 1:
        gaps = np.abs(flat - vals[:, None])
        gaps[np.arange(flat.shape[0]), idx] = np.inf
        kink = float(gaps.min())
    if axis is None:
        value = vals.reshape(())
        out_shape = ()
    else:
        moved = np.moveaxis(av, axis, -1).shape[:-1]
        value = vals.reshape(moved)
        out_shape = moved
    out = _out(value, a)

    def backward(g):
        gflat = np.zeros_like(flat)
        gflat[np.arange(flat.shape[0]), idx] = np.reshape(g, -1)
        if axis is None:
            return (gflat.reshape(av.shape),)
        moved_full = out_shape + (av.shape[axis],)
        return (np.moveaxis(gflat.reshape(moved_full), -1, axis),)

    return _record(name, (a,), out, backward, kink)


def max(a, axis=None):  # noqa: A001
    return _extremum("max", a, axis, np.argmax)


def min(a, axis=None):  # noqa: A001
    return _extremum("min", a, axis, np.argmin)


# --- linear algebra -------------------------------------------------------

def affine(x, weight, bias=None):
    """x @ weight.T + bias, x of shape (B, in), weight (out, in)."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch("affine", x.shape, weight.shape)
    xv, wv = x.values, weight.values
    y = xv @ wv.T
    if bias is not None:
        if bias.shape != (wv.shape[0],):
            raise ShapeMismatch("affine", weight.shape, bias.shape)
        y = y + bias.values
    out = _out(y, x)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ wv, g.T @ xv)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return _record("affine", inputs, out, backward)


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation of x (B, C, H, W) with weight (O, C, kh, kw); no bias."""
    if x.values.ndim != 4 or weight.values.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    xv, wv = x.values, weight.values
    B, C, H, W = xv.shape
    O, _, kh, kw = wv.shape
    p, s = padding, stride
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    # (B, C*kh*kw, Ho*Wo) keeps the result in NCHW order without transposes
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    wmat = wv.reshape(O, -1)
    out = _out(np.matmul(wmat, cols).reshape(B, O, Ho, Wo), x)

    def backward(g):
        g3 = g.reshape(B, O, Ho * Wo)
        dw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(wv.shape)
        dcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, Ho, Wo)
        dxp = np.zeros((B, C, Hp, Wp), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return (dx, dw)

    return _record("conv2d", (x, weight), out, backward)


def batch_norm(x, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel normalisation without affine parameters.

    Accepts (B, C) or (B, C, H, W). In train mode batch statistics are used and
    the running buffers (numpy arrays) are updated in place.
    """
    xv = x.values
    axes = (0,) if xv.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if xv.ndim == 2 else (1, -1, 1, 1)
    if running_mean.shape != (xv.shape[1],):
        raise ShapeMismatch("batch_norm", x.shape, running_mean.shape)
    if train:
        n = xv.size // xv.shape[1]
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xv.dtype)
        var = running_var.astype(xv.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu.reshape(bshape)) * inv.reshape(bshape)
    out = _out(xhat, x)

    def backward(g):
        if not train:
            return (g * inv.reshape(bshape),)
        n = xv.size // xv.shape[1]
        gsum = g.sum(axis=axes).reshape(bshape)
        gx = (g * xhat).sum(axis=axes).reshape(bshape)
        return (inv.reshape(bshape) / n * (n * g - gsum - xhat * gx),)

    return _record("batch_norm", (x,), out, backward)


def l2_normalize(x, eps=1e-12):
    """x / max(||x||, eps) along the last axis."""
    xv = x.values
    norm = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    denom = np.maximum(norm, xv.dtype.type(eps))
    y = xv / denom
    out = _out(y, x)
    live = norm > eps

    def backward(g):
        proj = g - y * np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(live, proj, g) / denom,)

    return _record("l2_normalize", (x,), out, backward)


def pairwise_sq_distances(x, y):
    """(N, D), (M, D) -> (N, M) squared Euclidean distances, clamped at 0."""
    if x.values.ndim != 2 or y.values.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeMismatch("pairwise_sq_distances", x.shape, y.shape)
    xv, yv = x.values, y.values
    sq = (np.sum(xv * xv, axis=1)[:, None] + np.sum(yv * yv, axis=1)[None, :]
          - 2 * (xv @ yv.T))
    out = _out(np.maximum(sq, 0), x)

    def backward(g):
        gx = 2 * (g.sum(axis=1)[:, None] * xv - g @ yv)
        gy = 2 * (g.sum(axis=0)[:, None] * yv - g.T @ xv)
        return (gx, gy)

    return _record("pairwise_sq_distances", (x, y), out, backward)


def row_distances(x, y, eps=1e-8):
    """Euclidean distance between aligned rows, sqrt(sum (x - y)^2 + eps)."""
    return sqrt(sum(square(sub(x, y)), axis=1), eps)
