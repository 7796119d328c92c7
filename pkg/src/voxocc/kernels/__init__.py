"""Hot-loop kernels with two interchangeable backends.

The compiled (numba) backend handles float32 and is the default when numba
imports cleanly. Set VOXOCC_NUMBA=0 to force the pure-numpy path, =1 to
require the compiled path (ImportError if numba is unavailable). Anything
float64 always runs on the numpy path regardless of the flag: the compiled
kernels are float32-only by design, and the float64 users (finite-difference
oracles) want maximum precision, not speed.

Both backends implement the same semantics; results agree to float32
roundoff (accumulation order differs in a few reductions). Within one
backend, results are bit-reproducible across runs and machines.
"""
import os

import numpy as np

from . import numpy_impl

_flag = os.environ.get("VOXOCC_NUMBA", "auto").strip().lower()
if _flag in ("0", "off", "false", "no"):
    _compiled = None
elif _flag in ("1", "on", "true", "yes"):
    from . import numba_impl as _compiled
else:
    try:
        from . import numba_impl as _compiled
    except ImportError:
        _compiled = None

NUMBA_ENABLED = _compiled is not None


def _use_compiled(*arrays):
    return NUMBA_ENABLED and all(a.dtype == np.float32 for a in arrays)


def _c(a, dtype=None):
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return np.ascontiguousarray(a)


def bilinear_forward(feat, coords, clamp_border=False):
    coords = _c(coords, feat.dtype)
    if _use_compiled(feat, coords):
        return _compiled.bilinear_forward(_c(feat), coords, clamp_border)
    return numpy_impl.bilinear_forward(feat, coords, clamp_border)


def bilinear_backward(feat, coords, gout, clamp_border=False):
    coords = _c(coords, feat.dtype)
    gout = _c(gout, feat.dtype)
    if _use_compiled(feat, coords, gout):
        return _compiled.bilinear_backward(_c(feat), coords, gout, clamp_border)
    return numpy_impl.bilinear_backward(feat, coords, gout, clamp_border)


def trilinear_forward(feat, coords, clamp_border=False):
    coords = _c(coords, feat.dtype)
    if _use_compiled(feat, coords):
        return _compiled.trilinear_forward(_c(feat), coords, clamp_border)
    return numpy_impl.trilinear_forward(feat, coords, clamp_border)


def trilinear_backward(feat, coords, gout, clamp_border=False):
    coords = _c(coords, feat.dtype)
    gout = _c(gout, feat.dtype)
    if _use_compiled(feat, coords, gout):
        return _compiled.trilinear_backward(_c(feat), coords, gout, clamp_border)
    return numpy_impl.trilinear_backward(feat, coords, gout, clamp_border)


def csr_matvec(indptr, indices, data, x):
    if _use_compiled(data, x):
        return _compiled.csr_matvec(indptr, indices, data, _c(x))
    return numpy_impl.csr_matvec(indptr, indices, data, x)


def csr_matvec_t(indptr, indices, data, g, cols):
    if _use_compiled(data, g):
        return _compiled.csr_matvec_t(indptr, indices, data, _c(g), cols)
    return numpy_impl.csr_matvec_t(indptr, indices, data, g, cols)


def scatter_add_rows(src, idx, n_rows):
    idx = _c(idx, np.int64)
    if _use_compiled(src):
        return _compiled.scatter_add_rows(_c(src), idx, n_rows)
    return numpy_impl.scatter_add_rows(src, idx, n_rows)


def rasterize_boxes(centers, sizes, yaws, classes, mins, cells, dims):
    centers = _c(centers, np.float32)
    sizes = _c(sizes, np.float32)
    yaws = _c(yaws, np.float32)
    classes = _c(classes, np.int32)
    mins = _c(mins, np.float32)
    cells = _c(cells, np.float32)
    dims = _c(np.asarray(dims), np.int64)
    if NUMBA_ENABLED:
        return _compiled.rasterize_boxes(centers, sizes, yaws, classes,
                                         mins, cells, dims)
    return numpy_impl.rasterize_boxes(centers, sizes, yaws, classes,
                                      mins, cells, dims)


def render_scene(origin, dirs, centers, sizes, yaws, classes, palette,
                 background, shade_scale):
    origin = _c(origin, np.float32)
    dirs = _c(dirs, np.float32)
    centers = _c(centers, np.float32)
    sizes = _c(sizes, np.float32)
    yaws = _c(yaws, np.float32)
    classes = _c(classes, np.int32)
    palette = _c(palette, np.float32)
    background = _c(background, np.float32)
    if NUMBA_ENABLED:
        return _compiled.render_scene(origin, dirs, centers, sizes, yaws,
                                      classes, palette, background,
                                      np.float32(shade_scale))
    return numpy_impl.render_scene(origin, dirs, centers, sizes, yaws,
                                   classes, palette, background,
                                   float(shade_scale))
