"""Numba-compiled float32 kernels.

Same semantics as numpy_impl; see the conventions documented there. Kernels
are deliberately serial so accumulation order (and therefore every training
run) is reproducible on any machine. Float64 work never lands here, the
dispatch layer routes it to the numpy path.

All literal constants go through np.float32: a bare python float would
silently promote the whole expression to float64.
"""
import numpy as np
from numba import njit

F32_1 = np.float32(1.0)
F32_0 = np.float32(0.0)
F32_HALF = np.float32(0.5)


@njit(cache=True)
def bilinear_forward(feat, coords, clamp_border):
    C, H, W = feat.shape
    P = coords.shape[0]
    out = np.zeros((P, C), dtype=np.float32)
    for p in range(P):
        r = coords[p, 0]
        c = coords[p, 1]
        if clamp_border:
            r = min(max(r, F32_0), np.float32(H - 1))
            c = min(max(c, F32_0), np.float32(W - 1))
        r0 = int(np.floor(r))
        c0 = int(np.floor(c))
        fr = r - np.float32(r0)
        fc = c - np.float32(c0)
        for dr in range(2):
            ri = r0 + dr
            if ri < 0 or ri >= H:
                continue
            wr = fr if dr == 1 else F32_1 - fr
            for dc in range(2):
                ci = c0 + dc
                if ci < 0 or ci >= W:
                    continue
                wc = fc if dc == 1 else F32_1 - fc
                w = wr * wc
                for ch in range(C):
                    out[p, ch] += feat[ch, ri, ci] * w
    return out


@njit(cache=True)
def bilinear_backward(feat, coords, gout, clamp_border):
    C, H, W = feat.shape
    P = coords.shape[0]
    gfeat = np.zeros_like(feat)
    gcoords = np.zeros_like(coords)
    for p in range(P):
        r = coords[p, 0]
        c = coords[p, 1]
        in_r = r >= F32_0 and r <= np.float32(H - 1)
        in_c = c >= F32_0 and c <= np.float32(W - 1)
        if clamp_border:
            r = min(max(r, F32_0), np.float32(H - 1))
            c = min(max(c, F32_0), np.float32(W - 1))
        r0 = int(np.floor(r))
        c0 = int(np.floor(c))
        fr = r - np.float32(r0)
        fc = c - np.float32(c0)
        gr = F32_0
        gc = F32_0
        for dr in range(2):
            ri = r0 + dr
            if ri < 0 or ri >= H:
                continue
            wr = fr if dr == 1 else F32_1 - fr
            sr = F32_1 if dr == 1 else -F32_1
            for dc in range(2):
                ci = c0 + dc
                if ci < 0 or ci >= W:
                    continue
                wc = fc if dc == 1 else F32_1 - fc
                sc = F32_1 if dc == 1 else -F32_1
                w = wr * wc
                dot = F32_0
                for ch in range(C):
                    g = gout[p, ch]
                    gfeat[ch, ri, ci] += g * w
                    dot += feat[ch, ri, ci] * g
                gr += sr * wc * dot
                gc += wr * sc * dot
        if clamp_border:
            if not in_r:
                gr = F32_0
            if not in_c:
                gc = F32_0
        gcoords[p, 0] = gr
        gcoords[p, 1] = gc
    return gfeat, gcoords


@njit(cache=True)
def trilinear_forward(feat, coords, clamp_border):
    C, X, Y, Z = feat.shape
    P = coords.shape[0]
    out = np.zeros((P, C), dtype=np.float32)
    for p in range(P):
        x = coords[p, 0]
        y = coords[p, 1]
        z = coords[p, 2]
        if clamp_border:
            x = min(max(x, F32_0), np.float32(X - 1))
            y = min(max(y, F32_0), np.float32(Y - 1))
            z = min(max(z, F32_0), np.float32(Z - 1))
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx = x - np.float32(x0)
        fy = y - np.float32(y0)
        fz = z - np.float32(z0)
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= X:
                continue
            wx = fx if dx == 1 else F32_1 - fx
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= Y:
                    continue
                wy = fy if dy == 1 else F32_1 - fy
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= Z:
                        continue
                    w = wx * wy * (fz if dz == 1 else F32_1 - fz)
                    for ch in range(C):
                        out[p, ch] += feat[ch, xi, yi, zi] * w
    return out


@njit(cache=True)
def trilinear_backward(feat, coords, gout, clamp_border):
    C, X, Y, Z = feat.shape
    P = coords.shape[0]
    gfeat = np.zeros_like(feat)
    gcoords = np.zeros_like(coords)
    for p in range(P):
        x = coords[p, 0]
        y = coords[p, 1]
        z = coords[p, 2]
        in_x = x >= F32_0 and x <= np.float32(X - 1)
        in_y = y >= F32_0 and y <= np.float32(Y - 1)
        in_z = z >= F32_0 and z <= np.float32(Z - 1)
        if clamp_border:
            x = min(max(x, F32_0), np.float32(X - 1))
            y = min(max(y, F32_0), np.float32(Y - 1))
            z = min(max(z, F32_0), np.float32(Z - 1))
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx = x - np.float32(x0)
        fy = y - np.float32(y0)
        fz = z - np.float32(z0)
        gx = F32_0
        gy = F32_0
        gz = F32_0
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= X:
                continue
            wx = fx if dx == 1 else F32_1 - fx
            sx = F32_1 if dx == 1 else -F32_1
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= Y:
                    continue
                wy = fy if dy == 1 else F32_1 - fy
                sy = F32_1 if dy == 1 else -F32_1
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= Z:
                        continue
                    wz = fz if dz == 1 else F32_1 - fz
                    sz = F32_1 if dz == 1 else -F32_1
                    w = wx * wy * wz
                    dot = F32_0
                    for ch in range(C):
                        g = gout[p, ch]
                        gfeat[ch, xi, yi, zi] += g * w
                        dot += feat[ch, xi, yi, zi] * g
                    gx += sx * wy * wz * dot
                    gy += wx * sy * wz * dot
                    gz += wx * wy * sz * dot
        if clamp_border:
            if not in_x:
                gx = F32_0
            if not in_y:
                gy = F32_0
            if not in_z:
                gz = F32_0
        gcoords[p, 0] = gx
        gcoords[p, 1] = gy
        gcoords[p, 2] = gz
    return gfeat, gcoords


@njit(cache=True)
def csr_matvec(indptr, indices, data, x):
    rows = indptr.shape[0] - 1
    F = x.shape[1]
    out = np.zeros((rows, F), dtype=np.float32)
    for r in range(rows):
        for k in range(indptr[r], indptr[r + 1]):
            col = indices[k]
            v = data[k]
            for f in range(F):
                out[r, f] += v * x[col, f]
    return out


@njit(cache=True)
def csr_matvec_t(indptr, indices, data, g, cols):
    rows = indptr.shape[0] - 1
    F = g.shape[1]
    out = np.zeros((cols, F), dtype=np.float32)
    for r in range(rows):
        for k in range(indptr[r], indptr[r + 1]):
            col = indices[k]
            v = data[k]
            for f in range(F):
                out[col, f] += v * g[r, f]
    return out


@njit(cache=True)
def scatter_add_rows(src, idx, n_rows):
    K, F = src.shape
    out = np.zeros((n_rows, F), dtype=np.float32)
    for k in range(K):
        r = idx[k]
        for f in range(F):
            out[r, f] += src[k, f]
    return out


@njit(cache=True)
def rasterize_boxes(centers, sizes, yaws, classes, mins, cells, dims):
    X = int(dims[0])
    Y = int(dims[1])
    Z = int(dims[2])
    labels = np.zeros((X, Y, Z), dtype=np.uint8)
    for b in range(centers.shape[0]):
        cx = centers[b, 0]
        cy = centers[b, 1]
        cz = centers[b, 2]
        hl = F32_HALF * sizes[b, 0]
        hw = F32_HALF * sizes[b, 1]
        hh = F32_HALF * sizes[b, 2]
        cs = np.cos(yaws[b])
        sn = np.sin(yaws[b])
        rx = np.abs(np.float32(2.0) * hl * cs) * F32_HALF + \
            np.abs(np.float32(2.0) * hw * sn) * F32_HALF
        ry = np.abs(np.float32(2.0) * hl * sn) * F32_HALF + \
            np.abs(np.float32(2.0) * hw * cs) * F32_HALF
        lab = classes[b]
        for i in range(X):
            px = mins[0] + (np.float32(i) + F32_HALF) * cells[0]
            dxw = px - cx
            if np.abs(dxw) > rx + F32_HALF * cells[0]:
                continue
            for j in range(Y):
                py = mins[1] + (np.float32(j) + F32_HALF) * cells[1]
                dyw = py - cy
                du = cs * dxw + sn * dyw
                if np.abs(du) > hl:
                    continue
                dv = -sn * dxw + cs * dyw
                if np.abs(dv) > hw:
                    continue
                for k in range(Z):
                    pz = mins[2] + (np.float32(k) + F32_HALF) * cells[2]
                    if np.abs(pz - cz) <= hh:
                        labels[i, j, k] = lab
    return labels


@njit(cache=True)
def render_scene(origin, dirs, centers, sizes, yaws, classes, palette,
                 background, shade_scale):
    H, W, _ = dirs.shape
    B = centers.shape[0]
    img = np.empty((3, H, W), dtype=np.float32)
    eps = np.float32(1e-6)
    tiny = np.float32(1e-12)
    for v in range(H):
        for u in range(W):
            best_t = np.float32(np.inf)
            best_b = -1
            for b in range(B):
                cs = np.cos(yaws[b])
                sn = np.sin(yaws[b])
                relx = origin[0] - centers[b, 0]
                rely = origin[1] - centers[b, 1]
                ox = cs * relx + sn * rely
                oy = -sn * relx + cs * rely
                oz = origin[2] - centers[b, 2]
                dx = cs * dirs[v, u, 0] + sn * dirs[v, u, 1]
                dy = -sn * dirs[v, u, 0] + cs * dirs[v, u, 1]
                dz = dirs[v, u, 2]
                t0 = F32_0
                t1 = np.float32(np.inf)
                ok = True
                for a in range(3):
                    if a == 0:
                        o, dd, half = ox, dx, F32_HALF * sizes[b, 0]
                    elif a == 1:
                        o, dd, half = oy, dy, F32_HALF * sizes[b, 1]
                    else:
                        o, dd, half = oz, dz, F32_HALF * sizes[b, 2]
                    if np.abs(dd) < tiny:
                        if np.abs(o) > half:
                            ok = False
                            break
                        continue
                    ta = (-half - o) / dd
                    tb = (half - o) / dd
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                if not ok or t1 < t0:
                    continue
                thit = t0 if t0 > eps else t1
                if thit > eps and thit < best_t:
                    best_t = thit
                    best_b = b
            if best_b < 0:
                img[0, v, u] = background[0]
                img[1, v, u] = background[1]
                img[2, v, u] = background[2]
            else:
                shade = F32_1 / (F32_1 + best_t / shade_scale)
                cls = classes[best_b]
                img[0, v, u] = palette[cls, 0] * shade
                img[1, v, u] = palette[cls, 1] * shade
                img[2, v, u] = palette[cls, 2] * shade
    return img
