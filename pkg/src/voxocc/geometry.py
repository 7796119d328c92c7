"""World/voxel/camera geometry: grids, boxes, pinhole projection, rigs.

Conventions used everywhere downstream:
  - world frame is right-handed, z up, units in meters
  - camera frame: x right, y down, z forward (optical axis)
  - image coordinates: u along width, v along height, origin at the top-left
    pixel corner; a world point is valid for a camera iff its camera-frame
    depth is positive and (u, v) lands inside the image rectangle
  - voxel (i, j, k) spans [min + i*cell, min + (i+1)*cell) per axis and its
    centre sits at min + (i + 0.5) * cell; flattened index is
    (i * ny + j) * nz + k
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractViolation


@dataclass(frozen=True)
class VoxelGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max
                and self.z_min < self.z_max):
            raise ContractViolation(f"grid extents inverted: {self}")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ContractViolation(f"grid resolution must be positive: {self}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_sizes(self) -> np.ndarray:
        return (self.maxs - self.mins) / np.array(self.dims, dtype=np.float64)

    def centers(self) -> np.ndarray:
        """All voxel centres, (nx*ny*nz, 3), x-major flattening."""
        cs = self.cell_sizes
        xs = self.x_min + (np.arange(self.nx) + 0.5) * cs[0]
        ys = self.y_min + (np.arange(self.ny) + 0.5) * cs[1]
        zs = self.z_min + (np.arange(self.nz) + 0.5) * cs[2]
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def scaled(self, factor: int) -> "VoxelGridSpec":
        """Same extents, resolution divided by factor (must divide evenly)."""
        f = int(factor)
        if f < 1:
            raise ContractViolation(f"scale factor must be >= 1, got {f}")
        for n in self.dims:
            if n % f:
                raise ContractViolation(
                    f"resolution {self.dims} not divisible by {f}")
        return VoxelGridSpec(self.x_min, self.x_max, self.y_min, self.y_max,
                             self.z_min, self.z_max,
                             self.nx // f, self.ny // f, self.nz // f)

    def world_to_cell(self, points: np.ndarray) -> np.ndarray:
        """Continuous cell coordinates; a voxel centre maps to its index."""
        return (points - self.mins) / self.cell_sizes - 0.5

    def flat_index(self, i, j, k):
        return (i * self.ny + j) * self.nz + k


@dataclass
class BBox3D:
    """Oriented box: size (l, w, h) with l along the box x axis before the
    z-rotation by yaw, w along y, h along z. Velocity is planar."""
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.center.shape != (3,) or self.size.shape != (3,) \
                or self.velocity.shape != (2,):
            raise ContractViolation("BBox3D: bad field shapes")
        if (self.size <= 0).any():
            raise ContractViolation(f"BBox3D: non-positive size {self.size}")
        if not (-np.pi <= self.yaw < np.pi):
            raise ContractViolation(f"BBox3D: yaw {self.yaw} not in [-pi, pi)")
        if self.class_id < 0:
            raise ContractViolation("BBox3D: negative class id")

    def nine(self) -> np.ndarray:
        """Regression vector (x, y, z, l, h, w, yaw, vx, vy)."""
        l, w, h = self.size
        return np.array([self.center[0], self.center[1], self.center[2],
                         l, h, w, self.yaw,
                         self.velocity[0], self.velocity[1]])

    @staticmethod
    def from_nine(nine: np.ndarray, class_id: int) -> "BBox3D":
        nine = np.asarray(nine, dtype=np.float64)
        if nine.shape != (9,):
            raise ContractViolation("from_nine: need 9 values")
        yaw = float(nine[6])
        # fold into [-pi, pi)
        yaw = (yaw + np.pi) % (2 * np.pi) - np.pi
        return BBox3D(center=nine[:3], size=nine[[3, 5, 4]], yaw=yaw,
                      velocity=nine[7:9], class_id=class_id)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inclusive point-in-box test, points (P, 3)."""
        d = np.atleast_2d(points) - self.center
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        du = c * d[:, 0] + s * d[:, 1]
        dv = -s * d[:, 0] + c * d[:, 1]
        half = self.size / 2.0
        return ((np.abs(du) <= half[0]) & (np.abs(dv) <= half[1])
                & (np.abs(d[:, 2]) <= half[2]))


@dataclass
class Camera:
    intrinsics: np.ndarray  # (3, 3)
    extrinsic: np.ndarray   # (4, 4), world -> camera
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ContractViolation("Camera: intrinsics must be 3x3")
        if self.extrinsic.shape != (4, 4):
            raise ContractViolation("Camera: extrinsic must be 4x4")
        K = self.intrinsics
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1 or K[1, 0] != 0 \
                or K[2, 0] != 0 or K[2, 1] != 0:
            raise ContractViolation(f"Camera: malformed intrinsics\n{K}")
        if not np.allclose(self.extrinsic[3], [0, 0, 0, 1]):
            raise ContractViolation("Camera: extrinsic bottom row must be "
                                    "(0,0,0,1)")
        R = self.extrinsic[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ContractViolation("Camera: rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ContractViolation("Camera: empty image plane")

    @property
    def projection(self) -> np.ndarray:
        """4x4 world-to-image transform (intrinsics lifted to 4x4 times
        the extrinsic); the third output row carries camera depth."""
        K4 = np.eye(4)
        K4[:3, :3] = self.intrinsics
        return K4 @ self.extrinsic

    @property
    def center(self) -> np.ndarray:
        R = self.extrinsic[:3, :3]
        t = self.extrinsic[:3, 3]
        return -R.T @ t

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space ray directions through every pixel centre.

        Returns (origin (3,), dirs (H, W, 3))."""
        us, vs = np.meshgrid(np.arange(self.width) + 0.5,
                             np.arange(self.height) + 0.5)
        pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        R = self.extrinsic[:3, :3]
        d_world = d_cam @ R  # == (R.T @ d_cam.T).T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.center, d_world


@dataclass
class CameraRig:
    cameras: list[Camera] = field(default_factory=list)

    def __post_init__(self):
        if not self.cameras:
            raise ContractViolation("CameraRig: no cameras")
        w, h = self.cameras[0].width, self.cameras[0].height
        for c in self.cameras:
            if (c.width, c.height) != (w, h):
                raise ContractViolation("CameraRig: mixed image sizes")

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        """(height, width)."""
        return self.cameras[0].height, self.cameras[0].width

    def key_bytes(self) -> bytes:
        """Stable byte signature, used to key cached view-transform builds."""
        parts = []
        for c in self.cameras:
            parts.append(c.intrinsics.tobytes())
            parts.append(c.extrinsic.tobytes())
            parts.append(np.array([c.width, c.height]).tobytes())
        return b"".join(parts)


def project_points(rig: CameraRig, points: np.ndarray):
    """Project world points into every camera of the rig.

    points (P, 3) -> u, v, depth, valid, each (n_cameras, P). u and v are
    continuous image coordinates; invalid entries hold zeros. valid means
    positive depth and inside the image rectangle.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractViolation(f"project_points: points {points.shape}")
    P = points.shape[0]
    n = rig.n_cameras
    hom = np.concatenate([points, np.ones((P, 1))], axis=1)
    u = np.zeros((n, P))
    v = np.zeros((n, P))
    depth = np.zeros((n, P))
    valid = np.zeros((n, P), dtype=bool)
    for i, cam in enumerate(rig.cameras):
        proj = hom @ cam.projection.T
        d = proj[:, 2]
        ok = d > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            uu = np.where(ok, proj[:, 0] / d, 0.0)
            vv = np.where(ok, proj[:, 1] / d, 0.0)
        inside = ok & (uu >= 0) & (uu < cam.width) & (vv >= 0) \
            & (vv < cam.height)
        u[i] = np.where(inside, uu, 0.0)
        v[i] = np.where(inside, vv, 0.0)
        depth[i] = d
        valid[i] = inside
    return u, v, depth, valid


def boxes_to_occupancy(boxes: Sequence[BBox3D],
                       grid: VoxelGridSpec) -> np.ndarray:
    """Rasterize boxes into a semantic label grid (uint8, 0 = free).

    A voxel is labelled when its centre lies inside the box (inclusive at
    faces); later boxes overwrite earlier ones.
    """
    if not boxes:
        return np.zeros(grid.dims, dtype=np.uint8)
    centers = np.stack([b.center for b in boxes]).astype(np.float32)
    sizes = np.stack([b.size for b in boxes]).astype(np.float32)
    yaws = np.array([b.yaw for b in boxes], dtype=np.float32)
    classes = np.array([b.class_id for b in boxes], dtype=np.int32)
    if (classes > 255).any():
        raise ContractViolation("boxes_to_occupancy: class id exceeds uint8")
    return kernels.rasterize_boxes(
        centers, sizes, yaws, classes,
        grid.mins.astype(np.float32),
        grid.cell_sizes.astype(np.float32),
        np.array(grid.dims, dtype=np.int64))


def make_ring_rig(n_cameras: int, radius: float, height: float,
                  pitch_deg: float, focal: float, image_width: int,
                  image_height: int) -> CameraRig:
    """Evenly spaced outward-facing cameras on a circle around the origin."""
    if n_cameras < 1:
        raise ContractViolation("make_ring_rig: need at least one camera")
    cams = []
    pitch = np.deg2rad(pitch_deg)
    for i in range(n_cameras):
        th = 2.0 * np.pi * i / n_cameras
        pos = np.array([radius * np.cos(th), radius * np.sin(th), height])
        fwd = np.array([np.cos(pitch) * np.cos(th),
                        np.cos(pitch) * np.sin(th),
                        -np.sin(pitch)])
        right = np.array([np.sin(th), -np.cos(th), 0.0])
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ pos
        K = np.array([[focal, 0.0, image_width / 2.0],
                      [0.0, focal, image_height / 2.0],
                      [0.0, 0.0, 1.0]])
        cams.append(Camera(intrinsics=K, extrinsic=E, width=image_width,
                           height=image_height))
    return CameraRig(cams)
