"""Differentiable array operations.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new Tensor. Backward closures capture only what they need.
"""
from __future__ import annotations

import numpy as np

from ..errors import NearZeroNorm, ShapeMismatch
from .tensor import Tensor, as_tensor, record_op

EPSILON_NORM = 1e-12


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return record_op(out, (a, b),
                     lambda g: (_unbroadcast(g / bd, ad.shape),
                                _unbroadcast(-g * out / bd, bd.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record_op(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record_op(np.asarray(out), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / count)


# ------------------------------------------------------------------- shaping

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return record_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record_op(out, (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(np.array(x.data[idx]), (x,), backward)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return record_op(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    n = len(xs)
    return record_op(out, tuple(xs),
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ------------------------------------------------------------------- algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x of shape (n, in), w (out, in), b (out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear {x.shape} with weight {w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"bias {b.shape} for {w.shape[0]} outputs")
        out = add(out, b)
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m)
    total = s.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    soft = s / total
    return record_op(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss, quadratic below ``beta``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1 {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    dd = np.where(small, d / beta, np.sign(d))
    return record_op(out, (pred, target), lambda g: (g * dd, -g * dd))


def l2_normalize(v, eps: float = EPSILON_NORM) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along its last axis."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise NearZeroNorm(f"vector norm {float(norm.min()):.3g} <= {eps}")
    out = v.data / norm

    def backward(g):
        return ((g - out * (out * g).sum(axis=-1, keepdims=True)) / norm,)

    return record_op(out, (v,), backward)


# ------------------------------------------------------------- convolutions

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``w`` is
    (C_out, C_in, kh, kw); ``b`` is (C_out,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if w.ndim != 4:
        raise ShapeMismatch(f"kernel must be 4-d, got {w.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with kernel {w.shape}")
    n, cin, h, wdt = xd.shape
    cout, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wdt + 2 * pad:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    xp = _pad(xd, pad).transpose(1, 0, 2, 3)  # (cin, n, H, W)
    # cols[c, i, j, n, y, x] = xp[c, n, y*stride + i, x*stride + j]
    cols = np.empty((cin, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeMismatch(f"bias {b.shape} for {cout} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out[0] if unbatched else out)
    xp_shape = xp.shape

    def backward(g):
        g4 = g[None] if unbatched else g
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros(xp_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wdt].transpose(1, 0, 2, 3)
            gx = gx[0] if unbatched else gx
        grads = [gx, gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record_op(out, tuple(parents), backward)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window
    are dropped. Ties go to the first cell of the window in row-major order."""
    x = as_tensor(x)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeMismatch(f"max_pool2d expects 3-d or 4-d input, got {x.shape}")
    n, c, h, w = xd.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"pool window {size} larger than input {h}x{w}")
    crop = xd[:, :, :ho * size, :wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = out[0] if unbatched else out

    def backward(g):
        g4 = g[None] if unbatched else g
        gwin = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gwin, arg[..., None], g4[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :ho * size, :wo * size] = gcrop
        return (gx[0] if unbatched else gx,)

    return record_op(np.ascontiguousarray(out), (x,), backward)


def square(x) -> Tensor:
    return mul(x, x)


def dot(a, b) -> Tensor:
    return sum(mul(a, b))

