"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only what the snow-mask networks and losses need is here: elementwise
arithmetic, reductions, 2-D convolution, batch normalisation, max pooling,
bilinear upsampling and channel concatenation. Tensors are at most 4-D
(batch, channel, height, width).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEBUG = False


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name
        if DEBUG and not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in tensor {name or ''}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _result(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _result(a.data / b.data, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def sigmoid_np(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = sigmoid_np(x.data).astype(x.data.dtype, copy=False)
    return _result(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` computed without overflow."""
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _result(out, (x,), lambda g: _accum(x, g * sigmoid_np(v)))


def clip(x, lo, hi) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: _accum(x, g * inside))


def hinge_sigmoid(x) -> Tensor:
    """``sigmoid(x) - 1/2`` for ``x >= 0`` and 0 otherwise."""
    x = as_tensor(x)
    pos = x.data >= 0
    s = sigmoid_np(x.data)
    out = np.where(pos, s - 0.5, 0.0)
    return _result(out, (x,), lambda g: _accum(x, g * np.where(pos, s * (1.0 - s), 0.0)))


# shape / reductions -----------------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())
    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def take(x, flat_index) -> Tensor:
    """Gather from the flattened tensor."""
    x = as_tensor(x)
    idx = np.asarray(flat_index, dtype=np.int64)

    def backward(g):
        full = np.zeros(x.data.size, dtype=g.dtype)
        np.add.at(full, idx, g)
        _accum(x, full.reshape(x.shape))
    return _result(x.data.reshape(-1)[idx], (x,), backward)


def concat(tensors, axis=1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            _accum(t, part)
    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


# layers ----------------------------------------------------------------------

def conv2d(x, w, b=None, padding=None) -> Tensor:
    """Stride-1 cross-correlation, NCHW input and OCkk weights, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    p = kh // 2 if padding is None else padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if kh == 1 and kw == 1 and p == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B C Ho Wo kh kw
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        if w.requires_grad:
            _accum(w, (g2.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and p == 0:
                _accum(x, dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
                return
            dcols = dcols.reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, dxp[:, :, p:p + H, p:p + W] if p else dxp)
    return _result(np.ascontiguousarray(out), parents, backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics (biased variance) are used and the
    running buffers are updated in place with ``momentum``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} with gamma {gamma.shape}")
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(shp)
            if training:
                gx = (gx - gx.mean(axis=axes, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            _accum(x, gx * inv.reshape(shp))
    return _result(out, (x, gamma, beta), backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial shape {(H, W)} not divisible by 2")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        _accum(x, gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W))
    return _result(out, (x,), backward)


def interp_matrix(n_in: int, scale: int) -> np.ndarray:
    """Bilinear interpolation weights, half-pixel centres, edge-clamped."""
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected 4-D input, got {x.shape}")
    if scale == 1:
        return x
    _, _, H, W = x.shape
    Uh = interp_matrix(H, scale).astype(x.data.dtype, copy=False)
    Uw = interp_matrix(W, scale).astype(x.data.dtype, copy=False)
    out = np.einsum("ih,bchw,jw->bcij", Uh, x.data, Uw, optimize=True)
    return _result(out, (x,), lambda g: _accum(x, np.einsum("ih,bcij,jw->bchw", Uh, g, Uw, optimize=True)))
