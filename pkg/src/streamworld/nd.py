"""Minimal n-dimensional array core: forward ops with hand-written backward
passes and an Adam optimizer. Arrays are contiguous row-major float32 by
default; float64 is supported as a shadow mode for gradient testing.

Every op checks its output for NaN/Inf (non-finite values are an error
state, not a silent result); disable via `check_finite(False)` or the
`no_check()` context for hot loops that are already validated.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """An op produced or received NaN/Inf."""


# Additive-mask sentinel: large enough that exp(x - max) underflows to 0.0
# exactly in f32, small enough not to overflow the subtraction.
NEG_INF = -1e30

_CHECK_FINITE = True
_GRAD_ENABLED = True


def check_finite(on: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = on


@contextmanager
def no_grad():
    """Disable tape building; inference paths run here so memory stays flat."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def no_check():
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _assert_finite(data: np.ndarray, ctx: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {ctx}")


class NdArray:
    """A numeric array with an optional gradient slot.

    `data` is a contiguous numpy array (f32 or f64); `grad`, once backward
    has run, has the same shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if isinstance(data, NdArray):
            data = data.data
        if isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)  # preserve f32/f64 of existing numpy values
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _assert_finite(arr, "NdArray()")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"NdArray(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "NdArray":
        return NdArray(self.data.copy())


def array(data, requires_grad: bool = False, dtype=np.float32) -> NdArray:
    a = np.ascontiguousarray(data, dtype=dtype)
    return NdArray(a, requires_grad=requires_grad)


def _make(data: np.ndarray, parents, backward, ctx: str) -> NdArray:
    _assert_finite(data, ctx)
    out = NdArray(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(target: NdArray, g: np.ndarray) -> None:
    if target.grad is None:
        target.grad = g.astype(target.data.dtype, copy=True)
    else:
        target.grad += g


def backward(root: NdArray) -> None:
    """Reverse-mode sweep from a scalar (or any) root; seeds d(root)=1."""
    topo: list[NdArray] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def matmul(a: NdArray, b: NdArray) -> NdArray:
    """(m,k) @ (k,n) -> (m,n). Backward: dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd, "matmul")


def softmax(x: NdArray, axis: int = -1) -> NdArray:
    """Max-stabilized softmax along `axis`; rows sum to 1, outputs positive."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = np.sum(g * y, axis=axis, keepdims=True)
            _accum(x, (g - dot) * y)

    return _make(y, (x,), bwd, "softmax")


def layer_norm(x: NdArray, gamma: NdArray, beta: NdArray, eps: float = 1e-5) -> NdArray:
    """Zero-mean/unit-variance over the last axis, then affine. eps > 0."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("gamma/beta must match the last axis")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            _accum(beta, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - np.mean(gx, axis=-1, keepdims=True)
                        - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(y, (x, gamma, beta), bwd, "layer_norm")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def activation(x: NdArray, kind: str) -> NdArray:
    """Elementwise nonlinearity: 'gelu' (tanh approximation) or 'silu'."""
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (x.data + 0.044715 * x.data ** 3)
        t = np.tanh(u)
        y = 0.5 * x.data * (1.0 + t)

        def bwd(g):
            if x.requires_grad:
                du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x.data ** 2)
                dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
                _accum(x, g * dy)

    elif kind == "silu":
        s = 1.0 / (1.0 + np.exp(-x.data))
        y = x.data * s

        def bwd(g):
            if x.requires_grad:
                _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _make(y, (x,), bwd, f"activation[{kind}]")


def attention(q: NdArray, k: NdArray, v: NdArray, mask: NdArray | None = None) -> NdArray:
    """softmax(q k^T / sqrt(d) + mask) v.

    q: (h, nq, d) or (nq, d); k, v: matching (h, nk, d). mask is additive,
    shape (nq, nk), entries 0 or NEG_INF; rows that are fully masked return
    zeros instead of NaN.
    """
    squeeze = q.data.ndim == 2
    qd = q.data[None] if squeeze else q.data
    kd = k.data[None] if squeeze else k.data
    vd = v.data[None] if squeeze else v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[:-1] != vd.shape[:-1] or qd.shape[0] != kd.shape[0]:
        raise ShapeError(f"attention q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    d = qd.shape[-1]
    scores = qd @ np.swapaxes(kd, -1, -2) / math.sqrt(d)
    if mask is not None:
        if mask.data.shape != (qd.shape[1], kd.shape[1]):
            raise ShapeError(f"mask shape {mask.data.shape} != ({qd.shape[1]}, {kd.shape[1]})")
        scores = scores + mask.data
    m = np.max(scores, axis=-1, keepdims=True)
    dead = m <= NEG_INF / 2  # fully masked query rows
    e = np.exp(scores - np.where(dead, 0.0, m))
    if mask is not None:
        e = np.where(scores <= NEG_INF / 2, 0.0, e)
    denom = np.sum(e, axis=-1, keepdims=True)
    w = np.where(dead, 0.0, e / np.where(denom == 0.0, 1.0, denom))
    out = w @ vd
    out_data = out[0] if squeeze else out

    def bwd(g):
        gd = g[None] if squeeze else g
        if v.requires_grad:
            gv = np.swapaxes(w, -1, -2) @ gd
            _accum(v, gv[0] if squeeze else gv)
        dw = gd @ np.swapaxes(vd, -1, -2)
        ds = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        if q.requires_grad:
            gq = ds @ kd / math.sqrt(d)
            _accum(q, gq[0] if squeeze else gq)
        if k.requires_grad:
            gk = np.swapaxes(ds, -1, -2) @ qd / math.sqrt(d)
            _accum(k, gk[0] if squeeze else gk)

    parents = (q, k, v) if mask is None else (q, k, v, mask)
    return _make(out_data, parents, bwd, "attention")


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Post-softmax attention weights only (numpy in/out); probe utility."""
    qq = q[None] if q.ndim == 2 else q
    kk = k[None] if k.ndim == 2 else k
    scores = qq @ np.swapaxes(kk, -1, -2) / math.sqrt(qq.shape[-1])
    if mask is not None:
        scores = scores + mask
    m = np.max(scores, axis=-1, keepdims=True)
    dead = m <= NEG_INF / 2
    e = np.exp(scores - np.where(dead, 0.0, m))
    e = np.where(scores <= NEG_INF / 2, 0.0, e)
    denom = np.sum(e, axis=-1, keepdims=True)
    w = np.where(dead, 0.0, e / np.where(denom == 0.0, 1.0, denom))
    return w[0] if q.ndim == 2 else w


# ---------------------------------------------------------------------------
# Plumbing ops
# ---------------------------------------------------------------------------


def add(a: NdArray, b: NdArray) -> NdArray:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add {a.data.shape} + {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: NdArray, b: NdArray) -> NdArray:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub {a.data.shape} - {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: NdArray, b: NdArray) -> NdArray:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul {a.data.shape} * {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd, "mul")


def scale(x: NdArray, s: float) -> NdArray:
    def bwd(g):
        if x.requires_grad:
            _accum(x, g * s)

    return _make(x.data * s, (x,), bwd, "scale")


def shift(x: NdArray, c: float) -> NdArray:
    def bwd(g):
        if x.requires_grad:
            _accum(x, g)

    return _make(x.data + c, (x,), bwd, "shift")


def add_bias(x: NdArray, b: NdArray) -> NdArray:
    """Broadcast-add a (d,) bias over the last axis of x."""
    if b.data.shape != (x.data.shape[-1],):
        raise ShapeError(f"bias {b.data.shape} vs last axis of {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, np.sum(g, axis=tuple(range(g.ndim - 1))))

    return _make(x.data + b.data, (x, b), bwd, "add_bias")


def reshape(x: NdArray, shape) -> NdArray:
    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), bwd, "reshape")


def transpose(x: NdArray, axes) -> NdArray:
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd, "transpose")


def concat(items, axis: int = 0) -> NdArray:
    items = list(items)
    sizes = [it.data.shape[axis] for it in items]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for it, lo, hi in zip(items, offsets[:-1], offsets[1:]):
            if it.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(it, g[tuple(sl)])

    return _make(np.concatenate([it.data for it in items], axis=axis), items, bwd, "concat")


def split(x: NdArray, n: int, axis: int = -1) -> list:
    """Split into n equal chunks along `axis`; inverse of concat."""
    if x.data.shape[axis] % n:
        raise ShapeError(f"axis {axis} of {x.data.shape} not divisible by {n}")
    size = x.data.shape[axis] // n
    outs = []
    for c in range(n):
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(c * size, (c + 1) * size)
        sl = tuple(sl)

        def bwd(g, sl=sl):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[sl] = g
                _accum(x, gx)

        outs.append(_make(np.ascontiguousarray(x.data[sl]), (x,), bwd, "split"))
    return outs


def gather_rows(table: NdArray, idx) -> NdArray:
    """out[i] = table[idx[i]]; backward scatter-adds into the chosen rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.data.shape[0]):
        raise IndexError(f"row index out of range [0, {table.data.shape[0]})")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _make(table.data[idx], (table,), bwd, "gather_rows")


def sum_sq(x: NdArray) -> NdArray:
    """Scalar sum of squares."""
    def bwd(g):
        if x.requires_grad:
            _accum(x, 2.0 * x.data * g)

    return _make(np.asarray(np.sum(x.data * x.data), dtype=x.data.dtype), (x,), bwd, "sum_sq")


def ssum(x: NdArray) -> NdArray:
    def bwd(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, g))

    return _make(np.asarray(np.sum(x.data), dtype=x.data.dtype), (x,), bwd, "ssum")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Param:
    """A trainable value with Adam moment buffers (zero-initialized)."""

    __slots__ = ("value", "m", "v", "step_count")

    def __init__(self, value: NdArray):
        value.requires_grad = True
        self.value = value
        self.m = np.zeros_like(value.data)
        self.v = np.zeros_like(value.data)
        self.step_count = 0

    @property
    def shape(self):
        return self.value.data.shape


def adam_step(param: Param, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Param:
    """Bias-corrected Adam update in place; increments step_count, clears grad."""
    g = param.value.grad
    if g is None:
        raise ValueError("adam_step: parameter has no gradient")
    param.step_count += 1
    t = param.step_count
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * (g * g)
    mhat = param.m / (1.0 - beta1 ** t)
    vhat = param.v / (1.0 - beta2 ** t)
    param.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.value.data.dtype)
    _assert_finite(param.value.data, "adam_step")
    param.value.grad = None
    return param
