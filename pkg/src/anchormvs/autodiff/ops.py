"""Differentiable kernels.

Every function accepts :class:`Tensor` or array-like inputs (arrays are
constants) and returns a :class:`Tensor`.  Elementwise binary ops follow
numpy broadcasting; the backward pass sums gradients back over broadcast
axes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _expit(x: np.ndarray) -> np.ndarray:
    """Logistic sigmoid; faster than ``scipy.special.expit`` for large arrays."""
    with np.errstate(over="ignore"):
        s = np.exp(np.negative(x))
    s += 1.0
    return np.reciprocal(s, out=s)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def add(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    ta, tb = _tracked(a), _tracked(b)
    return make(da + db, (a, b),
                lambda g: (_unbroadcast(g, da.shape) if ta else None,
                           _unbroadcast(g, db.shape) if tb else None), "add")


def sub(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    ta, tb = _tracked(a), _tracked(b)
    return make(da - db, (a, b),
                lambda g: (_unbroadcast(g, da.shape) if ta else None,
                           _unbroadcast(-g, db.shape) if tb else None), "sub")


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    ta, tb = _tracked(a), _tracked(b)
    return make(da * db, (a, b),
                lambda g: (_unbroadcast(g * db, da.shape) if ta else None,
                           _unbroadcast(g * da, db.shape) if tb else None), "mul")


def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da / db
    ta, tb = _tracked(a), _tracked(b)
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / db, da.shape) if ta else None,
                           _unbroadcast(-g * out / db, db.shape) if tb else None), "div")


def neg(a) -> Tensor:
    return make(-_data(a), (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    da = _data(a)
    return make(np.log(da), (a,), lambda g: (g / da,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    da = _data(a)
    return make(np.abs(da), (a,), lambda g: (g * np.sign(da),), "abs")


def sqrt(a) -> Tensor:
    out = np.sqrt(_data(a))
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    da = _data(a)
    return make(da * da, (a,), lambda g: (2.0 * g * da,), "square")


def reciprocal(a) -> Tensor:
    out = 1.0 / _data(a)
    return make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def sigmoid(a) -> Tensor:
    out = _expit(_data(a))
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a) -> Tensor:
    da = _data(a)
    s = _expit(da)
    out = da * s

    def backward(g):
        t = 1.0 - s
        t *= da
        t += 1.0
        t *= s
        t *= g
        return (t,)

    return make(out, (a,), backward, "silu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    da, db = _data(a), _data(b)
    out = np.where(cond, da, db)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), da.shape),
                _unbroadcast(np.where(cond, 0.0, g), db.shape))

    return make(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, da.shape).copy(),)

    return make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    if axis is None:
        n = da.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([da.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    da = _data(a)
    return make(da.reshape(shape), (a,), lambda g: (g.reshape(da.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    da = _data(a)
    axes = tuple(range(da.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make(da.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, a1: int, a2: int) -> Tensor:
    axes = list(range(_data(a).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    da = _data(a)
    out = da[idx]
    items = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in items)

    def backward(g):
        z = np.zeros_like(da)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return make(out, (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(arrays)))

    return make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    out = np.stack(arrays, axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))

    return make(out, tuple(tensors), backward, "stack")


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    da = _data(a)
    out = np.pad(da, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, da.shape))
    return make(out, (a,), lambda g: (g[sl],), "pad")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {da.shape} and {db.shape}")
    out = da @ db

    def backward(g):
        ga = g @ np.swapaxes(db, -1, -2)
        gb = np.swapaxes(da, -1, -2) @ g
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return make(out, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``y[..., o] = sum_k x[..., k] w[k, o] + b[o]``."""
    dx, dw = _data(x), _data(w)
    if dw.ndim != 2 or dx.shape[-1] != dw.shape[0]:
        raise ValueError(f"linear: input shape {dx.shape} incompatible with weight shape {dw.shape}")
    db = None if b is None else _data(b)
    if db is not None and db.shape != (dw.shape[1],):
        raise ValueError(f"linear: bias shape {db.shape} incompatible with weight shape {dw.shape}")
    flat = dx.reshape(-1, dw.shape[0])
    out = flat @ dw
    if db is not None:
        out += db
    out = out.reshape(dx.shape[:-1] + (dw.shape[1],))

    tx = _tracked(x)

    def backward(g):
        g2 = g.reshape(-1, dw.shape[1])
        gx = (g2 @ dw.T).reshape(dx.shape) if tx else None
        gw = flat.T @ g2
        gb = None if db is None else g2.sum(axis=0)
        return (gx, gw) if db is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "linear")


def linear_silu(x, w, b=None) -> Tensor:
    """``silu(linear(x, w, b))`` as one op with fewer temporaries."""
    dx, dw = _data(x), _data(w)
    if dw.ndim != 2 or dx.shape[-1] != dw.shape[0]:
        raise ValueError(f"linear_silu: input shape {dx.shape} incompatible with weight shape {dw.shape}")
    db = None if b is None else _data(b)
    flat = dx.reshape(-1, dw.shape[0])
    pre = flat @ dw
    if db is not None:
        pre += db
    s = _expit(pre)
    out = (pre * s).reshape(dx.shape[:-1] + (dw.shape[1],))
    tx = _tracked(x)

    def backward(g):
        t = 1.0 - s
        t *= pre
        t += 1.0
        t *= s
        t *= g.reshape(t.shape)
        gx = (t @ dw.T).reshape(dx.shape) if tx else None
        gw = flat.T @ t
        return (gx, gw) if db is None else (gx, gw, t.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "linear_silu")


# ---------------------------------------------------------------------------
# normalization and attention primitives
# ---------------------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    dx = _data(x)
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dg = None if gamma is None else _data(gamma)
    db = None if beta is None else _data(beta)
    out = xhat if dg is None else xhat * dg
    if db is not None:
        out = out + db
    n = dx.shape[-1]

    def backward(g):
        gh = g if dg is None else g * dg
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return tuple(grads)

    parents = [x] + ([gamma] if gamma is not None else []) + ([beta] if beta is not None else [])
    return make(out, tuple(parents), backward, "layer_norm")


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask`` entries.

    Masked entries get weight exactly 0.  Rows with no true entry return all
    zeros (sentinel) rather than NaN.
    """
    dl = _data(logits)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), dl.shape)
    shifted = np.where(m, dl, -np.inf)
    peak = shifted.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(m, np.exp(np.where(m, dl - peak, 0.0)), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (logits,), backward, "masked_softmax")


def softmax(logits, axis: int = -1) -> Tensor:
    return masked_softmax(logits, np.ones(_data(logits).shape, dtype=bool), axis=axis)


# ---------------------------------------------------------------------------
# convolution and resampling (NCHW)
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw)."""
    dx, dw = _data(x), _data(w)
    if dx.ndim != 4 or dw.ndim != 4 or dx.shape[1] != dw.shape[1]:
        raise ValueError(f"conv2d: input {dx.shape} incompatible with kernel {dw.shape}")
    bsz, c, h, wd = dx.shape
    o, _, kh, kw = dw.shape
    xp = np.pad(dx, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else dx
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * kh * kw)
    wmat = dw.reshape(o, -1)
    out = cols @ wmat.T
    db = None if b is None else _data(b)
    if db is not None:
        out += db
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    tx = _tracked(x)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(dw.shape)
        if not tx:
            return (None, gw) if db is None else (None, gw, g2.sum(axis=0))
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = (gx, gw) if db is None else (gx, gw, g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward, "conv2d")


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k×k mean pooling over the last two axes."""
    dx = _data(x)
    *lead, h, w = dx.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    out = dx.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        return (g,)

    return make(out, (x,), backward, "avg_pool2d")


def upsample_nearest(x, factor: int) -> Tensor:
    dx = _data(x)
    out = np.repeat(np.repeat(dx, factor, axis=-2), factor, axis=-1)

    def backward(g):
        *lead, h, w = dx.shape
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return make(out, (x,), backward, "upsample_nearest")


def depth_to_space(x, r: int) -> Tensor:
    """(B, C·r², H, W) -> (B, C, H·r, W·r); channel index c·r² + i·r + j."""
    dx = _data(x)
    bsz, cr, h, w = dx.shape
    if cr % (r * r):
        raise ValueError(f"depth_to_space: channels {cr} not divisible by {r * r}")
    c = cr // (r * r)
    out = dx.reshape(bsz, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, c, h * r, w * r)

    def backward(g):
        return (g.reshape(bsz, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(dx.shape),)

    return make(out, (x,), backward, "depth_to_space")


def masked_max_pool(x, mask) -> tuple[Tensor, np.ndarray]:
    """2×2 max pooling over valid entries only.

    ``x`` is (..., C, H, W) and ``mask`` (..., H, W).  Windows without a
    valid entry output 0 and a false mask.
    """
    dx = _data(x)
    m = np.asarray(mask, dtype=bool)
    *lead, c, h, w = dx.shape
    if h % 2 or w % 2:
        raise ValueError(f"masked_max_pool: spatial dims {(h, w)} must be even")
    h2, w2 = h // 2, w // 2
    win = dx.reshape(*lead, c, h2, 2, w2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, c, h2, w2, 4)
    mwin = np.moveaxis(m.reshape(*lead, h2, 2, w2, 2), -3, -2).reshape(*lead, h2, w2, 4)
    mwin_c = np.broadcast_to(mwin[..., None, :, :, :], win.shape)
    masked = np.where(mwin_c, win, -np.inf)
    arg = masked.argmax(axis=-1)
    out_mask = mwin.any(axis=-1)
    out = np.take_along_axis(masked, arg[..., None], axis=-1)[..., 0]
    out = np.where(out_mask[..., None, :, :], out, 0.0)

    def backward(g):
        g = np.where(out_mask[..., None, :, :], g, 0.0)
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(*lead, c, h2, w2, 2, 2)
        gwin = np.moveaxis(gwin, -2, -3).reshape(dx.shape)
        return (gwin,)

    return make(out, (x,), backward, "masked_max_pool"), out_mask


def sparse_sample(grid, weights: sp.spmatrix) -> Tensor:
    """``values = grid @ weights.T`` for grid (C, M) and a sparse (n, M) matrix."""
    dg = _data(grid)
    w = sp.csr_matrix(weights)
    wt = w.T.tocsr()
    out = np.asarray((w @ dg.T).T)

    def backward(g):
        return (np.asarray((wt @ g.T).T),)

    return make(out, (grid,), backward, "sparse_sample")


def bilinear_weights(coords: np.ndarray, height: int, width: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse interpolation matrix for continuous pixel coordinates.

    Pixel-center convention: grid index (i, j) sits at (j + 0.5, i + 0.5).
    Samples needing a corner outside the grid are invalid and get an
    all-zero row.  A corner with zero weight is not needed; coordinates
    within 1e-9 px of a center are snapped onto it.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    finite = np.isfinite(coords).all(axis=1)
    x = np.where(finite, coords[:, 0], -10.0) - 0.5
    y = np.where(finite, coords[:, 1], -10.0) - 0.5
    # absorb round-off so samples on the outermost centers stay valid
    x = np.where(np.abs(x - np.round(x)) < 1e-9, np.round(x), x)
    y = np.where(np.abs(y - np.round(y)) < 1e-9, np.round(y), y)
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    valid = (finite & (x0 >= 0) & (y0 >= 0)
             & ((x0 + 1 < width) | ((x0 < width) & (fx == 0.0)))
             & ((y0 + 1 < height) | ((y0 < height) & (fy == 0.0))))
    n = coords.shape[0]
    x0 = np.clip(x0, 0, width - 1)
    y0 = np.clip(y0, 0, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    wts = np.where(valid[:, None], wts, 0.0)
    mat = sp.csr_matrix((wts.ravel(), (rows, cols.ravel())), shape=(n, height * width))
    return mat, valid


def bilinear_sample(grid, coords) -> tuple[Tensor, np.ndarray]:
    """Sample a (C, H, W) grid at continuous (x, y) pixel coordinates.

    Returns values (C, n) and the validity flags.  Gradients flow to the
    grid only; coordinates are constants.
    """
    dg = _data(grid)
    c, h, w = dg.shape
    mat, valid = bilinear_weights(coords, h, w)
    return sparse_sample(reshape(grid, (c, h * w)), mat), valid


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard transformer sin/cos table for integer or real positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freq
    out = np.zeros(positions.shape + (dim,))
    out[..., 0:2 * half:2] = np.sin(ang)
    out[..., 1:2 * half:2] = np.cos(ang)
    return out


def sinusoidal_embedding_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """(rows·cols, dim) table: first half encodes the row, second the column."""
    half = dim // 2
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb = np.concatenate([sinusoidal_embedding(yy.ravel(), half),
                          sinusoidal_embedding(xx.ravel(), dim - half)], axis=-1)
    return emb
