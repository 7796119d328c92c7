"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path (and the only path for float64 inputs, which the
finite-difference oracles rely on). Semantics here are the contract; the
numba implementations must match bit-for-bit on float32 inputs up to
summation order.

Sampling convention: a feature grid value at integer index i sits at
continuous coordinate i (node-centred). coords follow array axis order,
i.e. coords[:, 0] indexes the first spatial axis of the feature array.
Out-of-extent behaviour is either zero (missing corners contribute nothing)
or clamp (coordinates pulled back to the border before interpolation).
"""
import numpy as np


def _corner_weights_1d(c, n, clamp_border):
    if clamp_border:
        c = np.clip(c, 0.0, n - 1.0)
    i0 = np.floor(c)
    f = c - i0
    i0 = i0.astype(np.int64)
    i1 = i0 + 1
    v0 = (i0 >= 0) & (i0 < n)
    v1 = (i1 >= 0) & (i1 < n)
    return i0, i1, f, v0, v1


def bilinear_forward(feat, coords, clamp_border=False):
    """feat (C,H,W), coords (P,2) in (row, col) order -> (P,C)."""
    C, H, W = feat.shape
    r0, r1, fr, vr0, vr1 = _corner_weights_1d(coords[:, 0], H, clamp_border)
    c0, c1, fc, vc0, vc1 = _corner_weights_1d(coords[:, 1], W, clamp_border)
    out = np.zeros((coords.shape[0], C), dtype=feat.dtype)
    one = feat.dtype.type(1.0)
    for ri, vr, wr in ((r0, vr0, one - fr), (r1, vr1, fr)):
        for ci, vc, wc in ((c0, vc0, one - fc), (c1, vc1, fc)):
            m = vr & vc
            if not m.any():
                continue
            w = (wr * wc)[m].astype(feat.dtype)
            out[m] += feat[:, ri[m], ci[m]].T * w[:, None]
    return out


def bilinear_backward(feat, coords, gout, clamp_border=False):
    C, H, W = feat.shape
    P = coords.shape[0]
    r0, r1, fr, vr0, vr1 = _corner_weights_1d(coords[:, 0], H, clamp_border)
    c0, c1, fc, vc0, vc1 = _corner_weights_1d(coords[:, 1], W, clamp_border)
    gfeat = np.zeros_like(feat)
    gcoords = np.zeros_like(coords)
    one = feat.dtype.type(1.0)
    gflat = gfeat.reshape(C, H * W)
    # dr: derivative of the row weight, dc likewise for the column weight
    for ri, vr, wr, dr in ((r0, vr0, one - fr, -one), (r1, vr1, fr, one)):
        for ci, vc, wc, dc in ((c0, vc0, one - fc, -one), (c1, vc1, fc, one)):
            m = vr & vc
            if not m.any():
                continue
            idx = ri[m] * W + ci[m]
            w = (wr * wc)[m]
            np.add.at(gflat.T, idx, gout[m] * w[:, None].astype(feat.dtype))
            v = feat[:, ri[m], ci[m]].T  # (pm, C)
            dot = (v * gout[m]).sum(axis=1)
            gcoords[m, 0] += dr * wc[m] * dot
            gcoords[m, 1] += wr[m] * dc * dot
    if clamp_border:
        inside_r = (coords[:, 0] >= 0.0) & (coords[:, 0] <= H - 1.0)
        inside_c = (coords[:, 1] >= 0.0) & (coords[:, 1] <= W - 1.0)
        gcoords[:, 0] *= inside_r
        gcoords[:, 1] *= inside_c
    return gfeat, gcoords


def trilinear_forward(feat, coords, clamp_border=False):
    """feat (C,X,Y,Z), coords (P,3) in axis order -> (P,C)."""
    C, X, Y, Z = feat.shape
    x0, x1, fx, vx0, vx1 = _corner_weights_1d(coords[:, 0], X, clamp_border)
    y0, y1, fy, vy0, vy1 = _corner_weights_1d(coords[:, 1], Y, clamp_border)
    z0, z1, fz, vz0, vz1 = _corner_weights_1d(coords[:, 2], Z, clamp_border)
    out = np.zeros((coords.shape[0], C), dtype=feat.dtype)
    one = feat.dtype.type(1.0)
    for xi, vx, wx in ((x0, vx0, one - fx), (x1, vx1, fx)):
        for yi, vy, wy in ((y0, vy0, one - fy), (y1, vy1, fy)):
            for zi, vz, wz in ((z0, vz0, one - fz), (z1, vz1, fz)):
                m = vx & vy & vz
                if not m.any():
                    continue
                w = (wx * wy * wz)[m].astype(feat.dtype)
                out[m] += feat[:, xi[m], yi[m], zi[m]].T * w[:, None]
    return out


def trilinear_backward(feat, coords, gout, clamp_border=False):
    C, X, Y, Z = feat.shape
    x0, x1, fx, vx0, vx1 = _corner_weights_1d(coords[:, 0], X, clamp_border)
    y0, y1, fy, vy0, vy1 = _corner_weights_1d(coords[:, 1], Y, clamp_border)
    z0, z1, fz, vz0, vz1 = _corner_weights_1d(coords[:, 2], Z, clamp_border)
    gfeat = np.zeros_like(feat)
    gcoords = np.zeros_like(coords)
    one = feat.dtype.type(1.0)
    gflat = gfeat.reshape(C, X * Y * Z)
    for xi, vx, wx, dx in ((x0, vx0, one - fx, -one), (x1, vx1, fx, one)):
        for yi, vy, wy, dy in ((y0, vy0, one - fy, -one), (y1, vy1, fy, one)):
            for zi, vz, wz, dz in ((z0, vz0, one - fz, -one), (z1, vz1, fz, one)):
                m = vx & vy & vz
                if not m.any():
                    continue
                idx = (xi[m] * Y + yi[m]) * Z + zi[m]
                w = (wx * wy * wz)[m]
                np.add.at(gflat.T, idx, gout[m] * w[:, None].astype(feat.dtype))
                v = feat[:, xi[m], yi[m], zi[m]].T
                dot = (v * gout[m]).sum(axis=1)
                gcoords[m, 0] += dx * (wy * wz)[m] * dot
                gcoords[m, 1] += dy * (wx * wz)[m] * dot
                gcoords[m, 2] += dz * (wx * wy)[m] * dot
    if clamp_border:
        for a, n in ((0, X), (1, Y), (2, Z)):
            inside = (coords[:, a] >= 0.0) & (coords[:, a] <= n - 1.0)
            gcoords[:, a] *= inside
    return gfeat, gcoords


def csr_matvec(indptr, indices, data, x):
    """Row-compressed sparse (R x cols) times dense (cols, F) -> (R, F)."""
    rows = indptr.shape[0] - 1
    out = np.zeros((rows, x.shape[1]), dtype=x.dtype)
    contrib = data[:, None].astype(x.dtype) * x[indices]
    for r in range(rows):
        s, e = indptr[r], indptr[r + 1]
        if e > s:
            out[r] = contrib[s:e].sum(axis=0)
    return out


def csr_matvec_t(indptr, indices, data, g, cols):
    """Transpose product: (cols, F) accumulation of g (R, F) rows."""
    rows = indptr.shape[0] - 1
    out = np.zeros((cols, g.shape[1]), dtype=g.dtype)
    row_of = np.repeat(np.arange(rows), np.diff(indptr))
    np.add.at(out, indices, data[:, None].astype(g.dtype) * g[row_of])
    return out


def scatter_add_rows(src, idx, n_rows):
    """out[idx[k]] += src[k]; src (K,F) -> (n_rows, F)."""
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def rasterize_boxes(centers, sizes, yaws, classes, mins, cells, dims):
    """Paint axis-aligned-in-box-frame labels into a voxel grid.

    Later boxes overwrite earlier ones. A voxel belongs to a box when its
    centre, expressed in the box frame, lies within half-extents (inclusive).
    sizes are (l, w, h): l along box x, w along box y, h along z.
    """
    X, Y, Z = int(dims[0]), int(dims[1]), int(dims[2])
    labels = np.zeros((X, Y, Z), dtype=np.uint8)
    xs = mins[0] + (np.arange(X) + 0.5) * cells[0]
    ys = mins[1] + (np.arange(Y) + 0.5) * cells[1]
    zs = mins[2] + (np.arange(Z) + 0.5) * cells[2]
    for b in range(centers.shape[0]):
        cx, cy, cz = centers[b]
        l, w, h = sizes[b]
        cy_, sy_ = np.cos(yaws[b]), np.sin(yaws[b])
        # conservative world-frame half extent of the rotated footprint
        rx = 0.5 * (abs(l * cy_) + abs(w * sy_))
        ry = 0.5 * (abs(l * sy_) + abs(w * cy_))
        ix = np.nonzero(np.abs(xs - cx) <= rx + 0.5 * cells[0])[0]
        iy = np.nonzero(np.abs(ys - cy) <= ry + 0.5 * cells[1])[0]
        iz = np.nonzero(np.abs(zs - cz) <= 0.5 * h)[0]
        if ix.size == 0 or iy.size == 0 or iz.size == 0:
            continue
        dxg, dyg = np.meshgrid(xs[ix] - cx, ys[iy] - cy, indexing="ij")
        du = cy_ * dxg + sy_ * dyg
        dv = -sy_ * dxg + cy_ * dyg
        inside2d = (np.abs(du) <= 0.5 * l) & (np.abs(dv) <= 0.5 * w)
        if not inside2d.any():
            continue
        sub = labels[np.ix_(ix, iy, iz)]
        sub[inside2d, :] = classes[b]
        labels[np.ix_(ix, iy, iz)] = sub
    return labels


def render_scene(origin, dirs, centers, sizes, yaws, classes, palette,
                 background, shade_scale):
    """Ray-cast oriented boxes. dirs (H,W,3) unit vectors -> (3,H,W)."""
    H, W, _ = dirs.shape
    d = dirs.reshape(-1, 3)
    P = d.shape[0]
    best_t = np.full(P, np.inf, dtype=dirs.dtype)
    best_b = np.full(P, -1, dtype=np.int64)
    for b in range(centers.shape[0]):
        cy_, sy_ = np.cos(yaws[b]), np.sin(yaws[b])
        rel = origin - centers[b]
        # box frame: rotate world xy by -yaw
        ox = cy_ * rel[0] + sy_ * rel[1]
        oy = -sy_ * rel[0] + cy_ * rel[1]
        oz = rel[2]
        dx = cy_ * d[:, 0] + sy_ * d[:, 1]
        dy = -sy_ * d[:, 0] + cy_ * d[:, 1]
        dz = d[:, 2]
        t0 = np.zeros(P, dtype=dirs.dtype)
        t1 = np.full(P, np.inf, dtype=dirs.dtype)
        ok = np.ones(P, dtype=bool)
        for o, dd, half in ((ox, dx, 0.5 * sizes[b][0]),
                            (oy, dy, 0.5 * sizes[b][1]),
                            (oz, dz, 0.5 * sizes[b][2])):
            par = np.abs(dd) < 1e-12
            ok &= ~(par & (np.abs(o) > half))
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-half - o) / dd
                tb = (half - o) / dd
            lo = np.minimum(ta, tb)
            hi = np.maximum(ta, tb)
            t0 = np.where(par, t0, np.maximum(t0, lo))
            t1 = np.where(par, t1, np.minimum(t1, hi))
        thit = np.where(t0 > 1e-6, t0, t1)
        ok &= (t1 >= t0) & (thit > 1e-6)
        better = ok & (thit < best_t)
        best_t[better] = thit[better]
        best_b[better] = b
    img = np.empty((P, 3), dtype=dirs.dtype)
    img[:] = background
    hit = best_b >= 0
    if hit.any():
        shade = 1.0 / (1.0 + best_t[hit] / shade_scale)
        img[hit] = palette[classes[best_b[hit]]] * shade[:, None]
    return np.ascontiguousarray(img.reshape(H, W, 3).transpose(2, 0, 1))
