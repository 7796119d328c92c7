"""Deterministic synthetic scenes: boxes on a ground slab, ring of cameras.

A scene is a handful of dynamic-class boxes scattered on a flat ground
plate (the plate itself is a box of the drivable-surface class, always
listed first), imaged by outward-facing cameras via ray casting against the
boxes. Occupancy ground truth rasterizes exactly the same box list, so
every labelled voxel is explained by a box and vice versa.

The same seed always produces the same scene, byte for byte: all draws come
from one PCG64 stream in a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import kernels
from .errors import ContractViolation
from .geometry import (BBox3D, CameraRig, VoxelGridSpec, boxes_to_occupancy,
                       make_ring_rig)

CLASS_NAMES = [
    "free", "barrier", "bicycle", "bus", "car", "construction_vehicle",
    "motorcycle", "pedestrian", "traffic_cone", "trailer", "truck",
    "drivable_surface", "other_flat", "sidewalk", "terrain", "manmade",
    "vegetation",
]
N_CLASSES = len(CLASS_NAMES)
FREE_CLASS = 0
GROUND_CLASS = CLASS_NAMES.index("drivable_surface")
# dynamic (detectable) classes are ids 1..10; detection class = id - 1
N_DET_CLASSES = 10

PALETTE = np.array([
    [0.05, 0.05, 0.08],   # free (background)
    [0.95, 0.55, 0.20],   # barrier
    [0.85, 0.20, 0.60],   # bicycle
    [0.95, 0.85, 0.10],   # bus
    [0.20, 0.45, 0.95],   # car
    [0.60, 0.30, 0.10],   # construction_vehicle
    [0.90, 0.10, 0.15],   # motorcycle
    [0.15, 0.85, 0.85],   # pedestrian
    [0.98, 0.40, 0.00],   # traffic_cone
    [0.55, 0.10, 0.75],   # trailer
    [0.10, 0.65, 0.30],   # truck
    [0.45, 0.45, 0.50],   # drivable_surface
    [0.70, 0.60, 0.45],   # other_flat
    [0.80, 0.75, 0.70],   # sidewalk
    [0.40, 0.55, 0.25],   # terrain
    [0.65, 0.70, 0.80],   # manmade
    [0.20, 0.50, 0.15],   # vegetation
], dtype=np.float32)

BACKGROUND = PALETTE[0]
SHADE_SCALE = 10.0

# plausible (l, w, h) ranges per dynamic class id
_SIZE_RANGES = {
    1: ((0.6, 2.2), (0.2, 0.5), (0.8, 1.2)),    # barrier
    2: ((1.4, 1.9), (0.4, 0.7), (1.0, 1.4)),    # bicycle
    3: ((3.0, 4.5), (1.8, 2.4), (2.0, 2.6)),    # bus
    4: ((2.2, 3.4), (1.4, 2.0), (1.3, 1.8)),    # car
    5: ((2.2, 3.5), (1.6, 2.4), (1.8, 2.6)),    # construction_vehicle
    6: ((1.5, 2.1), (0.5, 0.9), (1.0, 1.5)),    # motorcycle
    7: ((0.4, 0.8), (0.4, 0.8), (1.4, 1.9)),    # pedestrian
    8: ((0.3, 0.5), (0.3, 0.5), (0.6, 1.0)),    # traffic_cone
    9: ((2.8, 4.2), (1.8, 2.4), (2.2, 2.8)),    # trailer
    10: ((3.0, 4.4), (1.8, 2.4), (1.9, 2.6)),   # truck
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    grid: VoxelGridSpec = field(default_factory=lambda: VoxelGridSpec(
        -10.0, 10.0, -10.0, 10.0, -2.0, 2.0, 40, 40, 8))
    n_cameras: int = 6
    image_height: int = 128
    image_width: int = 128
    cam_radius: float = 1.0
    cam_height: float = 0.5
    cam_pitch_deg: float = 10.0
    focal: float = 100.0
    min_objects: int = 2
    max_objects: int = 8
    place_radius: tuple = (2.5, 8.5)
    max_speed: float = 5.0

    def rig(self) -> CameraRig:
        return make_ring_rig(self.n_cameras, self.cam_radius,
                             self.cam_height, self.cam_pitch_deg,
                             self.focal, self.image_width,
                             self.image_height)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(SceneSpec)}
        d["grid"] = {"x_min": self.grid.x_min, "x_max": self.grid.x_max,
                     "y_min": self.grid.y_min, "y_max": self.grid.y_max,
                     "z_min": self.grid.z_min, "z_max": self.grid.z_max,
                     "resolution": list(self.grid.dims)}
        d["place_radius"] = list(self.place_radius)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        known = {f.name for f in fields(SceneSpec)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractViolation(f"scene spec: unknown keys {unknown}")
        d = dict(d)
        if "grid" in d:
            g = dict(d["grid"])
            res = g.pop("resolution", None)
            allowed = {"x_min", "x_max", "y_min", "y_max", "z_min", "z_max"}
            bad = sorted(set(g) - allowed)
            if bad or res is None or len(res) != 3:
                raise ContractViolation(
                    f"scene spec: malformed grid section (unknown keys "
                    f"{bad})" if bad else "scene spec: grid needs extents "
                    "and a 3-value resolution")
            d["grid"] = VoxelGridSpec(g["x_min"], g["x_max"], g["y_min"],
                                      g["y_max"], g["z_min"], g["z_max"],
                                      int(res[0]), int(res[1]), int(res[2]))
        if "place_radius" in d:
            d["place_radius"] = tuple(float(v) for v in d["place_radius"])
        return SceneSpec(**d)


@dataclass
class Sample:
    """One scene: images, rig, labels, and the boxes behind them."""
    images: np.ndarray          # (n_cameras, 3, H, W) float32 in [0, 1]
    rig: CameraRig
    occupancy: np.ndarray       # (nx, ny, nz) uint8 labels
    boxes: list                 # dynamic BBox3D only, semantic class ids
    ground_box: BBox3D
    grid: VoxelGridSpec
    seed: int

    def all_boxes(self) -> list:
        return [self.ground_box] + list(self.boxes)


def ground_box_for(grid: VoxelGridSpec) -> BBox3D:
    """One-cell-thick drivable plate covering the bottom of the grid."""
    cz = grid.cell_sizes[2]
    return BBox3D(
        center=np.array([0.0, 0.0, grid.z_min + cz / 2.0]),
        size=np.array([grid.x_max - grid.x_min,
                       grid.y_max - grid.y_min, cz * 0.999]),
        yaw=0.0, velocity=np.zeros(2), class_id=GROUND_CLASS)


def sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list:
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    ground_top = spec.grid.z_min + spec.grid.cell_sizes[2]
    boxes = []
    for _ in range(n):
        cls = int(rng.integers(1, N_DET_CLASSES + 1))
        (l0, l1), (w0, w1), (h0, h1) = _SIZE_RANGES[cls]
        size = np.array([rng.uniform(l0, l1), rng.uniform(w0, w1),
                         rng.uniform(h0, h1)])
        r = rng.uniform(*spec.place_radius)
        th = rng.uniform(0.0, 2.0 * np.pi)
        center = np.array([r * np.cos(th), r * np.sin(th),
                           ground_top + size[2] / 2.0])
        yaw = float(rng.uniform(-np.pi, np.pi))
        speed = rng.uniform(0.0, spec.max_speed)
        vth = rng.uniform(0.0, 2.0 * np.pi)
        vel = np.array([speed * np.cos(vth), speed * np.sin(vth)])
        boxes.append(BBox3D(center=center, size=size, yaw=yaw, velocity=vel,
                            class_id=cls))
    return boxes


def render_images(rig: CameraRig, boxes: list) -> np.ndarray:
    """Ray-cast every camera against the box list; colors shaded by depth."""
    centers = np.stack([b.center for b in boxes]).astype(np.float32)
    sizes = np.stack([b.size for b in boxes]).astype(np.float32)
    yaws = np.array([b.yaw for b in boxes], dtype=np.float32)
    classes = np.array([b.class_id for b in boxes], dtype=np.int32)
    images = []
    for cam in rig.cameras:
        origin, dirs = cam.ray_grid()
        img = kernels.render_scene(
            origin.astype(np.float32), dirs.astype(np.float32),
            centers, sizes, yaws, classes, PALETTE, BACKGROUND, SHADE_SCALE)
        images.append(img)
    return np.stack(images, axis=0)


def generate(spec: SceneSpec, seed: Optional[int] = None) -> Sample:
    """Build one deterministic scene; seed overrides the spec's seed."""
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    boxes = sample_boxes(spec, rng)
    ground = ground_box_for(spec.grid)
    all_boxes = [ground] + boxes
    occupancy = boxes_to_occupancy(all_boxes, spec.grid)
    rig = spec.rig()
    images = render_images(rig, all_boxes)
    if images.min() < 0.0 or images.max() > 1.0:
        raise ContractViolation("generate: image values left [0, 1]")
    return Sample(images=images, rig=rig, occupancy=occupancy, boxes=boxes,
                  ground_box=ground, grid=spec.grid, seed=spec.seed)


def generate_dataset(spec: SceneSpec, n_scenes: int, base_seed: int = 0):
    """Scenes with seeds base_seed .. base_seed + n - 1."""
    if n_scenes < 1:
        raise ContractViolation("generate_dataset: need at least one scene")
    return [generate(spec, seed=base_seed + i) for i in range(n_scenes)]
