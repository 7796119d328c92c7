"""Differentiable ops over Tensor.

Every op validates shapes, computes forward with numpy (convolutions route
through sliding-window views and einsum so BLAS does the work), checks the
output for non-finite values, and registers a backward closure on the active
tape. Sampling and scatter ops call into the kernels package, which picks
the compiled or pure-numpy backend.

Broadcasting: add/sub/mul/div accept numpy-broadcastable shapes and reduce
gradients back with an unbroadcast sum. Other ops demand exact shapes.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import ContractViolation, NumericError
from .tensor import Tensor, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "relu", "sigmoid",
    "absolute", "atan2", "add_scalar", "mul_scalar", "pow_scalar", "clamp",
    "reshape", "transpose", "concat", "slice_axis", "sum", "mean", "matmul",
    "softmax", "gather_rows", "take_flat", "scatter_rows", "bilinear_sample",
    "trilinear_sample", "conv2d", "conv3d", "batchnorm", "upsample_nearest2d",
    "upsample_trilinear3d", "downsample_nearest3d", "const",
]

_builtin_sum = sum


def const(x, dtype=None) -> Tensor:
    """Wrap data as a non-differentiable tensor.

    Floating inputs keep their dtype unless one is given; everything else
    becomes float32.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) \
            else np.float32
    return Tensor(arr.astype(dtype, copy=False), requires_grad=False,
                  dtype=dtype)


def _need_tensor(t, op):
    if not isinstance(t, Tensor):
        raise ContractViolation(f"{op}: expected Tensor, got {type(t).__name__}")
    return t


def _same_dtype(op, *ts):
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ContractViolation(
                f"{op}: mixed dtypes {[t.dtype.name for t in ts]}")
    return d


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_ok(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _need_tensor(a, "add"), _need_tensor(b, "add")
    _same_dtype("add", a, b)
    _broadcast_ok("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    _broadcast_ok("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    _broadcast_ok("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return record("mul", (a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("div", a, b)
    _broadcast_ok("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record("div", (a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record("exp", (a,), out, backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return record("log", (a,), out, backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return record("relu", (a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (a,), out, backward)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return record("absolute", (a,), out, backward)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise arctangent of y/x; gradients regularized at the origin."""
    _same_dtype("atan2", y, x)
    if y.shape != x.shape:
        raise ContractViolation(f"atan2: shapes {y.shape} vs {x.shape}")
    out = np.arctan2(y.data, x.data)

    def backward(g):
        denom = y.data * y.data + x.data * x.data + y.dtype.type(1e-12)
        return g * x.data / denom, -g * y.data / denom

    return record("atan2", (y, x), out, backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + a.dtype.type(s)
    return record("add_scalar", (a,), out, lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    sv = a.dtype.type(s)
    out = a.data * sv
    return record("mul_scalar", (a,), out, lambda g: (g * sv,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    if p == 0:
        out = np.ones_like(a.data)
        return record("pow_scalar", (a,), out,
                      lambda g: (np.zeros_like(a.data),))
    out = a.data ** a.dtype.type(p)

    def backward(g):
        return (g * a.dtype.type(p) * a.data ** a.dtype.type(p - 1),)

    return record("pow_scalar", (a,), out, backward)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; bounds are scalars or arrays broadcasting to a.

    Gradient passes through wherever the input already lies inside the
    (inclusive) bounds.
    """
    if lo is None and hi is None:
        raise ContractViolation("clamp: need at least one bound")
    lo_a = None if lo is None else np.asarray(lo, dtype=a.dtype)
    hi_a = None if hi is None else np.asarray(hi, dtype=a.dtype)
    out = np.clip(a.data, lo_a, hi_a)

    def backward(g):
        m = np.ones(a.shape, dtype=bool)
        if lo_a is not None:
            m &= a.data >= lo_a
        if hi_a is not None:
            m &= a.data <= hi_a
        return (g * m,)

    return record("clamp", (a,), out, backward)


# ---------------------------------------------------------------------- shape

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return record("reshape", (a,), np.ascontiguousarray(out),
                  lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", (a,), out,
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    if not ts:
        raise ContractViolation("concat: empty input list")
    _same_dtype("concat", *ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return record("concat", tuple(ts), out, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[axis]):
        raise ContractViolation(
            f"slice_axis: [{start}:{stop}] out of range for axis size "
            f"{a.shape[axis]}")
    sl = (slice(None),) * axis + (slice(start, stop),)
    out = np.ascontiguousarray(a.data[sl])

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[sl] = g
        return (gx,)

    return record("slice_axis", (a,), out, backward)


# ----------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g.reshape(())),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return record("sum", (a,), np.asarray(out), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]

    def backward(g):
        scale = a.dtype.type(1.0 / n)
        if axis is None:
            return (np.full_like(a.data, g.reshape(()) * scale),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.shape) * scale).astype(a.dtype),)

    return record("mean", (a,), np.asarray(out), backward)


# --------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", (a, b), out, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return record("softmax", (a,), out, backward)


# ------------------------------------------------------------- gather/scatter

def gather_rows(a: Tensor, idx) -> Tensor:
    """out[k] = a[idx[k]] along the leading axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows: idx must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractViolation("gather_rows: index out of range")
    out = a.data[idx].copy()

    def backward(g):
        lead = a.shape[0]
        g2 = g.reshape(idx.size, -1)
        ga = kernels.scatter_add_rows(g2, idx, lead)
        return (ga.reshape(a.shape).astype(a.dtype, copy=False),)

    return record("gather_rows", (a,), out, backward)


def take_flat(a: Tensor, flat_idx) -> Tensor:
    """1-D gather from the flattened tensor."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    if flat_idx.ndim != 1:
        raise ContractViolation("take_flat: idx must be 1-D")
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= a.size):
        raise ContractViolation("take_flat: index out of range")
    out = a.data.reshape(-1)[flat_idx].copy()

    def backward(g):
        acc = np.bincount(flat_idx, weights=g.astype(np.float64),
                          minlength=a.size)
        return (acc.reshape(a.shape).astype(a.dtype),)

    return record("take_flat", (a,), out, backward)


def scatter_rows(src: Tensor, idx, n_rows: int) -> Tensor:
    """out[idx[k]] += src[k]; duplicate indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (src.shape[0],):
        raise ContractViolation("scatter_rows: idx shape mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractViolation("scatter_rows: index out of range")
    src2 = src.data.reshape(src.shape[0], -1)
    out = kernels.scatter_add_rows(src2, idx, n_rows)
    out = out.reshape((n_rows,) + src.shape[1:])

    def backward(g):
        return (g[idx].astype(src.dtype, copy=False),)

    return record("scatter_rows", (src,), out, backward)


# ------------------------------------------------------------------- sampling

def _check_coords(op, coords):
    if not np.isfinite(coords.data).all():
        raise NumericError(op, "sampling coordinates")


def bilinear_sample(feat: Tensor, coords: Tensor, border: str = "zero") -> Tensor:
    """feat (C,H,W), coords (P,2) as (row, col) -> (P,C).

    border='zero': corners outside the grid contribute nothing.
    border='clamp': coordinates are pulled back to the border first.
    """
    if feat.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ContractViolation(
            f"bilinear_sample: feat {feat.shape}, coords {coords.shape}")
    if border not in ("zero", "clamp"):
        raise ContractViolation(f"bilinear_sample: bad border '{border}'")
    _same_dtype("bilinear_sample", feat, coords)
    _check_coords("bilinear_sample", coords)
    cl = border == "clamp"
    out = kernels.bilinear_forward(feat.data, coords.data, cl)

    def backward(g):
        gf, gc = kernels.bilinear_backward(feat.data, coords.data, g, cl)
        return gf, gc

    return record("bilinear_sample", (feat, coords), out, backward)


def trilinear_sample(feat: Tensor, coords: Tensor, border: str = "zero") -> Tensor:
    """feat (C,X,Y,Z), coords (P,3) in axis order -> (P,C)."""
    if feat.ndim != 4 or coords.ndim != 2 or coords.shape[1] != 3:
        raise ContractViolation(
            f"trilinear_sample: feat {feat.shape}, coords {coords.shape}")
    if border not in ("zero", "clamp"):
        raise ContractViolation(f"trilinear_sample: bad border '{border}'")
    _same_dtype("trilinear_sample", feat, coords)
    _check_coords("trilinear_sample", coords)
    cl = border == "clamp"
    out = kernels.trilinear_forward(feat.data, coords.data, cl)

    def backward(g):
        gf, gc = kernels.trilinear_backward(feat.data, coords.data, g, cl)
        return gf, gc

    return record("trilinear_sample", (feat, coords), out, backward)


# --------------------------------------------------------------- convolutions

def _conv_subscripts(nd):
    sp = "xyz"[:nd]
    k = "ijk"[:nd]
    return f"bc{sp}{k},oc{k}->bo{sp}"


def _convnd(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int,
            padding: int, nd: int, op: str) -> Tensor:
    _same_dtype(op, *( (x, w, b) if b is not None else (x, w) ))
    if x.ndim != 2 + nd or w.ndim != 2 + nd:
        raise ContractViolation(f"{op}: x {x.shape}, w {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(
            f"{op}: channel mismatch x {x.shape[1]} vs w {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractViolation(f"{op}: bias shape {b.shape}")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"{op}: stride {stride}, padding {padding}")
    kshape = w.shape[2:]
    for d in range(nd):
        if x.shape[2 + d] + 2 * padding < kshape[d]:
            raise ContractViolation(f"{op}: kernel larger than padded input")

    pad_width = [(0, 0), (0, 0)] + [(padding, padding)] * nd
    xp = np.pad(x.data, pad_width) if padding else x.data
    win = sliding_window_view(xp, kshape, axis=tuple(range(2, 2 + nd)))
    sl = (slice(None), slice(None)) + (slice(None, None, stride),) * nd
    win = win[sl]
    out = np.einsum(_conv_subscripts(nd), win, w.data, optimize=True)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)
    out = np.ascontiguousarray(out)

    inputs = (x, w) if b is None else (x, w, b)
    sp_axes = tuple(range(2, 2 + nd))

    def backward(g):
        # batch and spatial axes contract away; einsum picks a slow kernel
        # for this pattern, tensordot goes straight to BLAS
        gw = np.tensordot(win, g, axes=((0,) + sp_axes, (0,) + sp_axes))
        gw = np.ascontiguousarray(np.moveaxis(gw, -1, 0))
        # input gradient: per-window kernel products scattered back onto the
        # padded input, one strided in-place add per kernel offset
        gcol = np.tensordot(g, w.data, axes=([1], [0]))  # (b, sp.., c, k..)
        gcol = np.moveaxis(gcol, 1 + nd, 1)
        gxp = np.zeros_like(xp)
        for off in np.ndindex(*kshape):
            dst = (slice(None), slice(None)) + tuple(
                slice(o, o + stride * g.shape[2 + d], stride)
                for d, o in enumerate(off))
            gxp[dst] += gcol[(Ellipsis,) + off]
        if padding:
            crop = (slice(None), slice(None)) + tuple(
                slice(padding, gxp.shape[2 + d] - padding)
                for d in range(nd))
            gx = np.ascontiguousarray(gxp[crop])
        else:
            gx = gxp
        gx = gx.astype(x.dtype, copy=False)
        gw = gw.astype(w.dtype, copy=False)
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd))).astype(b.dtype)
        return gx, gw, gb

    return record(op, inputs, out.astype(x.dtype, copy=False), backward)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """x (B,C,H,W), w (O,C,kh,kw) -> (B,O,H',W')."""
    return _convnd(x, w, b, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """x (B,C,X,Y,Z), w (O,C,kx,ky,kz) -> (B,O,X',Y',Z')."""
    return _convnd(x, w, b, stride, padding, 3, "conv3d")


# ------------------------------------------------------------------ batchnorm

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean,
              running_var, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Normalize over all axes except channel axis 1.

    running_mean/var are plain float32 arrays mutated in place during
    training (biased variance, matching the normalization itself).
    """
    if x.ndim < 2:
        raise ContractViolation("batchnorm: input needs a channel axis")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractViolation("batchnorm: gamma/beta must be (C,)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes, dtype=x.dtype)
        var = x.data.var(axis=axes, dtype=x.dtype)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    ivar = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu.reshape(bshape)) * ivar.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    n = x.data.size // C

    def backward(g):
        gg = (g * xhat).sum(axis=axes).astype(gamma.dtype)
        gb = g.sum(axis=axes).astype(beta.dtype)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            iv = ivar.reshape(bshape)
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (dxhat - (t1 + xhat * t2) / x.dtype.type(n)) * iv
        else:
            gx = dxhat * ivar.reshape(bshape)
        return gx.astype(x.dtype, copy=False), gg, gb

    return record("batchnorm", (x, gamma, beta), out, backward)


# ------------------------------------------------------------------ resampling

_UPSAMPLE_COORDS: dict = {}


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """x (B,C,H,W) -> (B,C,fH,fW), block replication."""
    if x.ndim != 4 or factor < 1:
        raise ContractViolation("upsample_nearest2d: bad arguments")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)).astype(x.dtype),)

    return record("upsample_nearest2d", (x,), out, backward)


def _upsample3d_coords(shape, f, dtype):
    key = (shape, f, np.dtype(dtype).name)
    cached = _UPSAMPLE_COORDS.get(key)
    if cached is not None:
        return cached
    X, Y, Z = shape
    axes = []
    for n in shape:
        axes.append((np.arange(n * f, dtype=np.float64) + 0.5) / f - 0.5)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    coords = np.ascontiguousarray(coords.astype(dtype))
    _UPSAMPLE_COORDS[key] = coords
    return coords


def upsample_trilinear3d(x: Tensor, factor: int) -> Tensor:
    """x (B,C,X,Y,Z) -> (B,C,fX,fY,fZ), border-clamped interpolation."""
    if x.ndim != 5 or factor < 1:
        raise ContractViolation("upsample_trilinear3d: bad arguments")
    f = int(factor)
    B, C, X, Y, Z = x.shape
    coords = _upsample3d_coords((X, Y, Z), f, x.dtype)
    outs = []
    for b in range(B):
        s = kernels.trilinear_forward(x.data[b], coords, True)
        outs.append(s.T.reshape(C, X * f, Y * f, Z * f))
    out = np.ascontiguousarray(np.stack(outs, axis=0))

    def backward(g):
        gx = np.empty_like(x.data)
        for b_ in range(B):
            gb = np.ascontiguousarray(g[b_].reshape(C, -1).T)
            gf, _ = kernels.trilinear_backward(x.data[b_], coords, gb, True)
            gx[b_] = gf
        return (gx,)

    return record("upsample_trilinear3d", (x,), out, backward)


def downsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """x (B,C,X,Y,Z) -> strided subsample, keeping index 0 of each block."""
    if x.ndim != 5 or factor < 1:
        raise ContractViolation("downsample_nearest3d: bad arguments")
    f = int(factor)
    sl = (slice(None), slice(None)) + (slice(None, None, f),) * 3
    out = np.ascontiguousarray(x.data[sl])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return record("downsample_nearest3d", (x,), out, backward)
