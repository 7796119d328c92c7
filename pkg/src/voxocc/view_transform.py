"""Camera-to-voxel feature lifting through precomputed sparse matrices.

For every pyramid level we build two row-normalized CSR matrices against the
flattened multi-camera feature pixels (pixel column index is
(cam * H + v) * W + u):

  - a local matrix, one row per voxel of the level's grid
  - a global matrix, one row per ground-plane pillar (x, y)

Each voxel is represented by five probe points: its centre and the centre
shifted by a quarter cell along +-x and +-y. Every probe that projects with
positive depth inside some camera image contributes weight 1/k to the
feature cell under it (k = number of valid probe hits for that row), so a
row with any visibility sums to 1 and a fully occluded voxel keeps an empty
row. Hits landing on the same feature cell merge by summing.

The cache file format ("IVTM"): little-endian, magic, version u32,
rig-signature hash u64, base-grid extents f64[6], level count u32, then per
level grid dims u32[3], feature stride u32, feature h/w u32[2] and the two
matrices. A matrix is rows u64, cols u64, nnz u64, offsets u64[rows+1],
column indices u32[nnz], values f32[nnz].
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels, ops
from .errors import ContractViolation, CheckpointError, DegenerateRigError
from .geometry import CameraRig, VoxelGridSpec, project_points
from .tensor import Tensor, record

MAGIC = b"IVTM"
VERSION = 1


@dataclass
class SparseCSR:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int32)
        self.data = np.asarray(self.data, dtype=np.float32)

    def validate(self):
        rows, cols = self.shape
        if self.indptr.shape != (rows + 1,):
            raise ContractViolation("SparseCSR: bad indptr length")
        if self.indptr[0] != 0 or self.indptr[-1] != self.data.size:
            raise ContractViolation("SparseCSR: indptr endpoints wrong")
        if (np.diff(self.indptr) < 0).any():
            raise ContractViolation("SparseCSR: indptr not monotone")
        if self.indices.shape != self.data.shape:
            raise ContractViolation("SparseCSR: indices/data length mismatch")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= cols:
                raise ContractViolation("SparseCSR: column index out of range")
            for r in range(rows):
                s, e = self.indptr[r], self.indptr[r + 1]
                if e - s > 1 and (np.diff(self.indices[s:e]) <= 0).any():
                    raise ContractViolation(
                        f"SparseCSR: row {r} columns not strictly increasing")
        if not np.isfinite(self.data).all() or (self.data < 0).any():
            raise ContractViolation("SparseCSR: values must be finite and "
                                    "non-negative")

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.shape[0], dtype=np.float64)
        np.add.at(out, np.repeat(np.arange(self.shape[0]),
                                 np.diff(self.indptr)),
                  self.data.astype(np.float64))
        return out

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        row_of = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[row_of, self.indices] = self.data
        return out

    @staticmethod
    def from_coo(rows, cols, vals, shape) -> "SparseCSR":
        """Build CSR from triplets; duplicate (row, col) entries merge."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float32)
        if rows.size:
            order = np.lexsort((cols, rows))
            rows, cols, vals = rows[order], cols[order], vals[order]
            key = rows * shape[1] + cols
            first = np.ones(key.size, dtype=bool)
            first[1:] = key[1:] != key[:-1]
            group = np.cumsum(first) - 1
            merged = np.zeros(int(group[-1]) + 1, dtype=np.float64)
            np.add.at(merged, group, vals.astype(np.float64))
            rows = rows[first]
            cols = cols[first]
            vals = merged.astype(np.float32)
        counts = np.bincount(rows, minlength=shape[0])
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return SparseCSR(indptr=indptr, indices=cols.astype(np.int32),
                         data=vals, shape=tuple(shape))


def csr_matvec(mat: SparseCSR, x: Tensor) -> Tensor:
    """Differentiable (rows, cols) @ (cols, F) -> (rows, F).

    The matrix is a constant; gradient flows to x through the transpose
    product.
    """
    if x.ndim != 2 or x.shape[0] != mat.shape[1]:
        raise ContractViolation(
            f"csr_matvec: matrix {mat.shape} vs input {x.shape}")
    out = kernels.csr_matvec(mat.indptr, mat.indices, mat.data, x.data)

    def backward(g):
        return (kernels.csr_matvec_t(mat.indptr, mat.indices, mat.data, g,
                                     mat.shape[1]).astype(x.dtype,
                                                          copy=False),)

    return record("csr_matvec", (x,), out.astype(x.dtype, copy=False),
                  backward)


@dataclass
class VTLevel:
    grid: VoxelGridSpec
    stride: int
    feat_h: int
    feat_w: int
    local: SparseCSR
    bev: SparseCSR


@dataclass
class ViewTransform:
    base_grid: VoxelGridSpec
    n_cameras: int
    rig_hash: int
    levels: list[VTLevel]


def _probe_offsets(cell_sizes: np.ndarray) -> np.ndarray:
    qx = cell_sizes[0] / 4.0
    qy = cell_sizes[1] / 4.0
    return np.array([[0.0, 0.0, 0.0],
                     [qx, 0.0, 0.0], [-qx, 0.0, 0.0],
                     [0.0, qy, 0.0], [0.0, -qy, 0.0]])


def rig_signature(rig: CameraRig, grid: VoxelGridSpec) -> int:
    blob = rig.key_bytes() + grid.mins.tobytes() + grid.maxs.tobytes() + \
        np.array(grid.dims, dtype=np.int64).tobytes()
    return zlib.crc32(blob)


def build_view_transform(rig: CameraRig, grid: VoxelGridSpec,
                         n_levels: int = 3,
                         base_stride: int = 8) -> ViewTransform:
    """Project every level's voxel probes into the rig and assemble the
    sparse lifting matrices. Raises if nothing is visible anywhere."""
    if n_levels < 1:
        raise ContractViolation("build_view_transform: need >= 1 level")
    img_h, img_w = rig.image_size
    levels = []
    total_hits = 0
    for li in range(n_levels):
        scale = 2 ** li
        stride = base_stride * scale
        if img_h % stride or img_w % stride:
            raise ContractViolation(
                f"image size {(img_h, img_w)} not divisible by stride "
                f"{stride}")
        gl = grid.scaled(scale)
        fh, fw = img_h // stride, img_w // stride
        centers = gl.centers()
        offs = _probe_offsets(gl.cell_sizes)
        pts = (centers[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        u, v, _, valid = project_points(rig, pts)
        cam_idx, pt_idx = np.nonzero(valid)
        vox = pt_idx // offs.shape[0]
        fu = np.floor(u[cam_idx, pt_idx] / stride).astype(np.int64)
        fv = np.floor(v[cam_idx, pt_idx] / stride).astype(np.int64)
        col = (cam_idx * fh + fv) * fw + fu
        ncols = rig.n_cameras * fh * fw
        total_hits += vox.size

        k_vox = np.bincount(vox, minlength=gl.n_voxels)
        w_local = 1.0 / k_vox[vox]
        local = SparseCSR.from_coo(vox, col, w_local,
                                   (gl.n_voxels, ncols))

        pillar = vox // gl.nz
        k_pil = np.bincount(pillar, minlength=gl.nx * gl.ny)
        w_bev = 1.0 / k_pil[pillar]
        bev = SparseCSR.from_coo(pillar, col, w_bev,
                                 (gl.nx * gl.ny, ncols))
        local.validate()
        bev.validate()
        levels.append(VTLevel(grid=gl, stride=stride, feat_h=fh, feat_w=fw,
                              local=local, bev=bev))
    if total_hits == 0:
        raise DegenerateRigError(
            "no voxel probe projects into any camera; check rig and grid")
    return ViewTransform(base_grid=grid, n_cameras=rig.n_cameras,
                         rig_hash=rig_signature(rig, grid), levels=levels)


def apply_view_transform(vt: ViewTransform, feats: list[Tensor]):
    """Lift per-camera features into voxel and pillar space.

    feats[l] has shape (n_cameras, C, H_l, W_l). Returns (locals, bevs):
    locals[l] is (C, nx, ny, nz), bevs[l] is (C, nx, ny), all on the tape.
    """
    if len(feats) != len(vt.levels):
        raise ContractViolation(
            f"apply_view_transform: {len(feats)} feature levels for "
            f"{len(vt.levels)} matrices")
    locals_, bevs = [], []
    for f, lv in zip(feats, vt.levels):
        n, c, h, w = f.shape
        if n != vt.n_cameras or h != lv.feat_h or w != lv.feat_w:
            raise ContractViolation(
                f"apply_view_transform: features {f.shape} vs level "
                f"({vt.n_cameras},*,{lv.feat_h},{lv.feat_w})")
        flat = ops.reshape(ops.transpose(f, (0, 2, 3, 1)), (n * h * w, c))
        loc = csr_matvec(lv.local, flat)
        g = lv.grid
        vol = ops.transpose(ops.reshape(loc, (g.nx, g.ny, g.nz, c)),
                            (3, 0, 1, 2))
        bev = csr_matvec(lv.bev, flat)
        bev = ops.transpose(ops.reshape(bev, (g.nx, g.ny, c)), (2, 0, 1))
        locals_.append(vol)
        bevs.append(bev)
    return locals_, bevs


# ------------------------------------------------------------------ cache IO

def _write_matrix(fh, m: SparseCSR):
    fh.write(np.array([m.shape[0], m.shape[1], m.nnz],
                      dtype="<u8").tobytes())
    fh.write(m.indptr.astype("<u8").tobytes())
    fh.write(m.indices.astype("<u4").tobytes())
    fh.write(m.data.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("view-transform cache truncated")
    return b


def _read_matrix(fh) -> SparseCSR:
    rows, cols, nnz = np.frombuffer(_read_exact(fh, 24), dtype="<u8")
    indptr = np.frombuffer(_read_exact(fh, 8 * (int(rows) + 1)),
                           dtype="<u8").astype(np.int64)
    indices = np.frombuffer(_read_exact(fh, 4 * int(nnz)),
                            dtype="<u4").astype(np.int32)
    data = np.frombuffer(_read_exact(fh, 4 * int(nnz)),
                         dtype="<f4").astype(np.float32)
    m = SparseCSR(indptr=indptr, indices=indices, data=data,
                  shape=(int(rows), int(cols)))
    m.validate()
    return m


def save_view_transform(path, vt: ViewTransform):
    g = vt.base_grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([VERSION], dtype="<u4").tobytes())
        fh.write(np.array([vt.rig_hash], dtype="<u8").tobytes())
        fh.write(np.array([g.x_min, g.x_max, g.y_min, g.y_max,
                           g.z_min, g.z_max], dtype="<f8").tobytes())
        fh.write(np.array([g.nx, g.ny, g.nz, vt.n_cameras, len(vt.levels)],
                          dtype="<u4").tobytes())
        for lv in vt.levels:
            fh.write(np.array([lv.grid.nx, lv.grid.ny, lv.grid.nz,
                               lv.stride, lv.feat_h, lv.feat_w],
                              dtype="<u4").tobytes())
            _write_matrix(fh, lv.local)
            _write_matrix(fh, lv.bev)


def load_view_transform(path) -> ViewTransform:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a view-transform cache")
        version = np.frombuffer(_read_exact(fh, 4), dtype="<u4")[0]
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        rig_hash = int(np.frombuffer(_read_exact(fh, 8), dtype="<u8")[0])
        ext = np.frombuffer(_read_exact(fh, 48), dtype="<f8")
        nx, ny, nz, n_cams, n_levels = np.frombuffer(_read_exact(fh, 20),
                                                     dtype="<u4")
        grid = VoxelGridSpec(*ext, int(nx), int(ny), int(nz))
        levels = []
        for _ in range(int(n_levels)):
            gx, gy, gz, stride, fh_, fw_ = np.frombuffer(
                _read_exact(fh, 24), dtype="<u4")
            sub = grid.scaled(grid.nx // int(gx))
            if sub.dims != (int(gx), int(gy), int(gz)):
                raise CheckpointError("cache level grid inconsistent with "
                                      "base grid")
            local = _read_matrix(fh)
            bev = _read_matrix(fh)
            levels.append(VTLevel(grid=sub, stride=int(stride),
                                  feat_h=int(fh_), feat_w=int(fw_),
                                  local=local, bev=bev))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return ViewTransform(base_grid=grid, n_cameras=int(n_cams),
                         rig_hash=rig_hash, levels=levels)
