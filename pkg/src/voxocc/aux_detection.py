"""Query-based 3D detection branch used as an auxiliary training signal.

A fixed set of learnable queries decodes to 3D points inside the grid
extent, then runs through N refinement layers. Each layer applies, in
order: sparse self-attention over a coarse voxelization of the current
points, then three cross-attention modules that sample image features,
ground-plane features and volume class logits at the points. Every
cross-attention module updates the query residually with a softmax-weighted
sum over its source scales, regresses a point offset, and emits a
classification + box output through shared heads, so with all modules
enabled there are layers * 3 supervised head outputs.

Module parameters are shared across the N layers (the loop iterates the
same modules); each of the three cross-attention positions owns its
parameters and its pair of heads.

Boxes are decoded as (x, y, z, l, h, w, yaw, vx, vy): centre = point +
offset, sizes = default size * exp(clamped raw), yaw from a (sin, cos)
pair, planar velocity raw.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractViolation
from .geometry import CameraRig, VoxelGridSpec, project_points
from .layers import Linear, MLP, Module, ModuleList
from .tensor import Tensor


# --------------------------------------------------------------- samplers

def sample_bev(bev: Tensor, grid: VoxelGridSpec, points: Tensor) -> Tensor:
    """Bilinear lookup of pillar features at world points (x, y)."""
    c, nx, ny = bev.shape
    if (nx, ny) != (grid.nx, grid.ny):
        raise ContractViolation(f"sample_bev: map {bev.shape} vs grid "
                                f"{grid.dims}")
    cell = grid.cell_sizes
    mins = grid.mins
    xy = ops.slice_axis(points, 1, 0, 2)
    shifted = ops.sub(xy, ops.const(mins[:2].reshape(1, 2),
                                    dtype=points.dtype.type))
    coords = ops.add_scalar(
        ops.mul(shifted, ops.const(1.0 / cell[:2].reshape(1, 2),
                                   dtype=points.dtype.type)), -0.5)
    return ops.bilinear_sample(bev, coords, border="zero")


def sample_volume(vol: Tensor, grid: VoxelGridSpec, points: Tensor) -> Tensor:
    """Trilinear lookup of volume features at world points."""
    c, nx, ny, nz = vol.shape
    if (nx, ny, nz) != grid.dims:
        raise ContractViolation(f"sample_volume: volume {vol.shape} vs grid "
                                f"{grid.dims}")
    shifted = ops.sub(points, ops.const(grid.mins.reshape(1, 3),
                                        dtype=points.dtype.type))
    coords = ops.add_scalar(
        ops.mul(shifted, ops.const(1.0 / grid.cell_sizes.reshape(1, 3),
                                   dtype=points.dtype.type)), -0.5)
    return ops.trilinear_sample(vol, coords, border="zero")


def sample_visual(feat: Tensor, rig: CameraRig, stride: int,
                  points: Tensor) -> Tensor:
    """Project points into every camera, sample the feature level there and
    average over the cameras that actually see each point.

    feat is (n_cameras, C, H, W) at the given stride of the rig's image
    size. A feature cell (iv, iu) is anchored at image pixel
    (stride * iv, stride * iu); continuous sampling coordinates are just
    (v / stride, u / stride). Points seen by no camera receive zeros.
    """
    n, c, fh, fw = feat.shape
    if n != rig.n_cameras:
        raise ContractViolation(
            f"sample_visual: {n} feature maps for {rig.n_cameras} cameras")
    m = points.shape[0]
    dt = points.dtype.type
    _, _, _, valid = project_points(rig, points.data.astype(np.float64))
    ones = ops.const(np.ones((m, 1), dtype=points.dtype))
    hom = ops.concat([points, ones], axis=1)
    inv_stride = 1.0 / float(stride)
    acc = None
    for i, cam in enumerate(rig.cameras):
        proj = ops.matmul(hom, ops.const(cam.projection.T, dtype=dt))
        depth = ops.slice_axis(proj, 1, 2, 3)
        safe = ops.clamp(depth, lo=0.1)
        u = ops.div(ops.slice_axis(proj, 1, 0, 1), safe)
        v = ops.div(ops.slice_axis(proj, 1, 1, 2), safe)
        coords = ops.mul_scalar(ops.concat([v, u], axis=1), inv_stride)
        fmap = ops.reshape(ops.slice_axis(feat, 0, i, i + 1), (c, fh, fw))
        sampled = ops.bilinear_sample(fmap, coords, border="zero")
        gated = ops.mul(sampled, ops.const(
            valid[i].astype(points.dtype).reshape(m, 1)))
        acc = gated if acc is None else ops.add(acc, gated)
    counts = np.maximum(valid.sum(axis=0), 1).astype(points.dtype)
    return ops.mul(acc, ops.const(1.0 / counts.reshape(m, 1)))


# --------------------------------------------------------- self-attention

class SparseSelfAttention(Module):
    """Neighborhood mixing over an occupancy-style voxelization of points.

    Points are binned into cells `group` base voxels wide; queries in one
    cell are summed into a cell feature; a 3x3x3 convolution runs over the
    occupied cells only (absent neighbors contribute nothing); every query
    then receives its cell's output residually.
    """

    def __init__(self, c: int, rng: np.random.Generator, group: int = 4):
        super().__init__()
        self.group = group
        # cells hold query sums, so a fan-in init still amplifies; the
        # extra damping keeps the residual update small at the start
        std = 0.05 * np.sqrt(1.0 / (27.0 * c))
        self.weight = Tensor(
            (rng.standard_normal((27, c, c)) * std).astype(np.float32),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

    def __call__(self, q: Tensor, points: Tensor,
                 grid: VoxelGridSpec) -> Tensor:
        m, c = q.shape
        cell_world = grid.cell_sizes * self.group
        rel = (points.data.astype(np.float64) - grid.mins) / cell_world
        ijk = np.floor(rel).astype(np.int64)
        dims = np.maximum(1, -(-np.array(grid.dims) // self.group))
        ijk = np.clip(ijk, 0, dims - 1)
        keys = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
        uniq, inverse = np.unique(keys, return_inverse=True)
        ncell = uniq.size
        key_to_cell = {int(k): i for i, k in enumerate(uniq)}
        cells = ops.scatter_rows(q, inverse, ncell)

        ci = uniq // (dims[1] * dims[2])
        cj = (uniq // dims[2]) % dims[1]
        ck = uniq % dims[2]
        out = None
        o = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    ni, nj, nk = ci + di, cj + dj, ck + dk
                    inb = ((ni >= 0) & (ni < dims[0]) & (nj >= 0)
                           & (nj < dims[1]) & (nk >= 0) & (nk < dims[2]))
                    nkeys = (ni * dims[1] + nj) * dims[2] + nk
                    src, dst = [], []
                    for idx in np.nonzero(inb)[0]:
                        j = key_to_cell.get(int(nkeys[idx]))
                        if j is not None:
                            dst.append(idx)
                            src.append(j)
                    if dst:
                        w_o = ops.reshape(
                            ops.slice_axis(self.weight, 0, o, o + 1), (c, c))
                        mix = ops.matmul(ops.gather_rows(cells,
                                                         np.array(src)), w_o)
                        contrib = ops.scatter_rows(mix, np.array(dst), ncell)
                        out = contrib if out is None else ops.add(out, contrib)
                    o += 1
        if out is None:
            return q
        out = ops.add(out, ops.reshape(self.bias, (1, c)))
        return ops.add(q, ops.gather_rows(out, inverse))


# -------------------------------------------------------- cross-attention

class CrossAttention(Module):
    """Residual query update from one source family plus point refinement.

    Scale mixing weights come from a softmax over a per-query MLP; the
    sampled (optionally projected) features are blended with those weights
    and added to the query; a second MLP regresses a point offset which is
    clamped back into the grid extent.
    """

    def __init__(self, c: int, n_src: int, src_dim: int, hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.n_src = n_src
        self.w_mlp = MLP([c, hidden, n_src], rng)
        self.reg_mlp = MLP([c, hidden, 3], rng)
        # near-uniform scale weights and near-zero offsets at the start,
        # otherwise the residual stream blows up across refinement layers
        self.w_mlp.scale_final_(0.01)
        self.reg_mlp.scale_final_(0.01)
        self.src_proj = Linear(src_dim, c, rng) if src_dim != c else None
        if self.src_proj is not None:
            # raw class logits arrive at a much larger scale than features
            self.src_proj.weight.data *= 0.1

    def __call__(self, q: Tensor, points: Tensor, sampled: list[Tensor],
                 lo: np.ndarray, hi: np.ndarray):
        if len(sampled) != self.n_src:
            raise ContractViolation(
                f"CrossAttention: {len(sampled)} sources, expected "
                f"{self.n_src}")
        w = ops.softmax(self.w_mlp(q), axis=1)
        agg = None
        for l, f in enumerate(sampled):
            if self.src_proj is not None:
                f = self.src_proj(f)
            term = ops.mul(f, ops.slice_axis(w, 1, l, l + 1))
            agg = term if agg is None else ops.add(agg, term)
        q = ops.add(q, agg)
        delta = self.reg_mlp(q)
        points = ops.clamp(ops.add(points, delta), lo=lo, hi=hi)
        return q, points


@dataclass
class HeadOutput:
    layer: int
    module: str
    class_logits: Tensor  # (M, K+1), last column is background
    boxes: Tensor         # (M, 9)


class DetectionBranch(Module):
    def __init__(self, c: int, n_queries: int, n_layers: int,
                 n_det_classes: int, n_occ_classes: int, n_levels: int,
                 hidden: int, size_bias, rng: np.random.Generator,
                 group: int = 4, use_self_attention: bool = True,
                 use_visual: bool = True, use_bev: bool = True,
                 use_volume: bool = True):
        super().__init__()
        if not (use_visual or use_bev or use_volume):
            raise ContractViolation(
                "DetectionBranch: all cross-attention modules disabled")
        self.n_layers = n_layers
        self.n_det_classes = n_det_classes
        self.size_bias = np.asarray(size_bias, dtype=np.float32)
        if self.size_bias.shape != (3,) or (self.size_bias <= 0).any():
            raise ContractViolation("DetectionBranch: bad size bias")
        self.queries = Tensor(
            rng.standard_normal((n_queries, c)).astype(np.float32),
            requires_grad=True)
        self.point_mlp = MLP([c, hidden, 3], rng)
        self.self_attn = (SparseSelfAttention(c, rng, group)
                          if use_self_attention else None)
        self.ca = ModuleList()
        self.heads_cls = ModuleList()
        self.heads_box = ModuleList()
        self.ca_names = []
        for name, enabled, n_src, src_dim in (
                ("visual", use_visual, n_levels, c),
                ("bev", use_bev, n_levels, c),
                ("volume", use_volume, n_levels + 1, n_occ_classes)):
            if not enabled:
                continue
            self.ca.append(CrossAttention(c, n_src, src_dim, hidden, rng))
            head_c = MLP([c, hidden, n_det_classes + 1], rng)
            head_b = MLP([c, hidden, 10], rng)
            # damped heads: first boxes sit at the decoded points with the
            # default size, first class logits are nearly uniform
            head_c.scale_final_(0.01)
            head_b.scale_final_(0.01)
            self.heads_cls.append(head_c)
            self.heads_box.append(head_b)
            self.ca_names.append(name)

    def decode_points(self, q: Tensor, grid: VoxelGridSpec) -> Tensor:
        lo = grid.mins.astype(np.float32)
        hi = grid.maxs.astype(np.float32)
        s01 = ops.sigmoid(self.point_mlp(q))
        span = ops.const((hi - lo).reshape(1, 3))
        return ops.add(ops.mul(s01, span), ops.const(lo.reshape(1, 3)))

    def decode_box(self, head: MLP, q: Tensor, points: Tensor) -> Tensor:
        raw = head(q)
        center = ops.add(points, ops.slice_axis(raw, 1, 0, 3))
        logsize = ops.clamp(ops.slice_axis(raw, 1, 3, 6), lo=-5.0, hi=5.0)
        size = ops.mul(ops.exp(logsize),
                       ops.const(self.size_bias.reshape(1, 3)))
        yaw = ops.atan2(ops.slice_axis(raw, 1, 6, 7),
                        ops.slice_axis(raw, 1, 7, 8))
        vel = ops.slice_axis(raw, 1, 8, 10)
        return ops.concat([center, size, yaw, vel], axis=1)

    def __call__(self, feats: list[Tensor], bevs: list[Tensor],
                 volumes: list[Tensor], vol_grids: list[VoxelGridSpec],
                 rig: CameraRig, grid: VoxelGridSpec,
                 bev_grids: list[VoxelGridSpec] = None) -> list[HeadOutput]:
        """Run the refinement stack for one sample.

        feats: image pyramid, each (n_cameras, C, H_l, W_l)
        bevs: pillar maps, each (C, nx_l, ny_l)
        volumes: class-logit volumes, each (Cls, nx_l, ny_l, nz_l)
        """
        lo = grid.mins.astype(np.float32)
        hi = grid.maxs.astype(np.float32)
        if bev_grids is None:
            bev_grids = [grid.scaled(2 ** i) for i in range(len(bevs))]
        q = self.queries
        points = self.decode_points(q, grid)
        outputs: list[HeadOutput] = []
        for layer in range(self.n_layers):
            if self.self_attn is not None:
                q = self.self_attn(q, points, grid)
            for ca, name, h_cls, h_box in zip(self.ca, self.ca_names,
                                              self.heads_cls, self.heads_box):
                if name == "visual":
                    sampled = [
                        sample_visual(f, rig, lv_stride, points)
                        for f, lv_stride in zip(
                            feats, [8 * 2 ** i for i in range(len(feats))])]
                elif name == "bev":
                    sampled = [sample_bev(b, g, points)
                               for b, g in zip(bevs, bev_grids)]
                else:
                    sampled = [sample_volume(v, g, points)
                               for v, g in zip(volumes, vol_grids)]
                q, points = ca(q, points, sampled, lo, hi)
                outputs.append(HeadOutput(
                    layer=layer, module=name,
                    class_logits=h_cls(q),
                    boxes=self.decode_box(h_box, q, points)))
        return outputs
