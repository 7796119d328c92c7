"""Serialization: PPM images, label grids, checkpoints, JSON sidecars.

Binary formats are little-endian with magic + version headers and are
expected to round-trip losslessly:

  .occgrid  "OCCG" | version u32 | nx ny nz u32 | class count u32 |
            nx*ny*nz uint8 labels, x-major ((i*ny + j)*nz + k)
  .ckpt     "VOXC" | version u32 | entry count u32 | entries of
            name_len u16, utf8 name, ndim u8, dims u32[ndim], f32 data
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractViolation
from .geometry import BBox3D, Camera, CameraRig, VoxelGridSpec

OCC_MAGIC = b"OCCG"
CKPT_MAGIC = b"VOXC"
VERSION = 1


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"{what}: truncated file")
    return b


# ------------------------------------------------------------------ images

def write_ppm(path, image: np.ndarray):
    """image (3, H, W) float in [0, 1] -> binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractViolation(f"write_ppm: expected (3,H,W), got "
                                f"{image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractViolation("write_ppm: values must lie in [0, 1]")
    h, w = image.shape[1:]
    data = np.rint(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (3, H, W) float32 in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise CheckpointError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise CheckpointError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise CheckpointError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) \
        / np.float32(255.0)


# ------------------------------------------------------------- label grids

def write_occgrid(path, labels: np.ndarray, n_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 3 or labels.dtype != np.uint8:
        raise ContractViolation(
            f"write_occgrid: need uint8 (nx,ny,nz), got {labels.dtype} "
            f"{labels.shape}")
    if labels.size and labels.max() >= n_classes:
        raise ContractViolation("write_occgrid: label exceeds class count")
    with open(path, "wb") as fh:
        fh.write(OCC_MAGIC)
        fh.write(np.array([VERSION, *labels.shape, n_classes],
                          dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(labels).tobytes())


def read_occgrid(path):
    """Returns (labels (nx,ny,nz) uint8, n_classes)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, str(path)) != OCC_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a label grid")
        version, nx, ny, nz, n_classes = np.frombuffer(
            _read_exact(fh, 20, str(path)), dtype="<u4")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        n = int(nx) * int(ny) * int(nz)
        labels = np.frombuffer(_read_exact(fh, n, str(path)), dtype=np.uint8)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    labels = labels.reshape(int(nx), int(ny), int(nz)).copy()
    if labels.size and labels.max() >= n_classes:
        raise CheckpointError(f"{path}: label exceeds declared class count")
    return labels, int(n_classes)


# -------------------------------------------------------------- checkpoints

def write_checkpoint(path, blobs: dict):
    """Named float32 arrays -> binary checkpoint, names sorted."""
    names = sorted(blobs)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.array([VERSION, len(names)], dtype="<u4").tobytes())
        for name in names:
            arr = np.asarray(blobs[name], dtype="<f4")
            nb = name.encode()
            if len(nb) > 0xFFFF:
                raise ContractViolation(f"checkpoint name too long: {name}")
            fh.write(np.array([len(nb)], dtype="<u2").tobytes())
            fh.write(nb)
            fh.write(np.array([arr.ndim], dtype="u1").tobytes())
            fh.write(np.array(arr.shape, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> dict:
    blobs = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, str(path)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, count = np.frombuffer(_read_exact(fh, 8, str(path)),
                                       dtype="<u4")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(int(count)):
            (nlen,) = np.frombuffer(_read_exact(fh, 2, str(path)),
                                    dtype="<u2")
            name = _read_exact(fh, int(nlen), str(path)).decode()
            (ndim,) = np.frombuffer(_read_exact(fh, 1, str(path)), dtype="u1")
            shape = tuple(np.frombuffer(
                _read_exact(fh, 4 * int(ndim), str(path)), dtype="<u4"))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * size, str(path)),
                                 dtype="<f4")
            blobs[name] = data.reshape([int(s) for s in shape]).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return blobs


# --------------------------------------------------------------- JSON sides

def grid_to_dict(grid: VoxelGridSpec) -> dict:
    return {"x_min": grid.x_min, "x_max": grid.x_max,
            "y_min": grid.y_min, "y_max": grid.y_max,
            "z_min": grid.z_min, "z_max": grid.z_max,
            "resolution": [grid.nx, grid.ny, grid.nz]}


def grid_from_dict(d: dict) -> VoxelGridSpec:
    res = d["resolution"]
    return VoxelGridSpec(d["x_min"], d["x_max"], d["y_min"], d["y_max"],
                         d["z_min"], d["z_max"], int(res[0]), int(res[1]),
                         int(res[2]))


def write_rig_json(path, rig: CameraRig):
    cams = [{
        "intrinsics": c.intrinsics.tolist(),
        "extrinsic": c.extrinsic.tolist(),
        "width": c.width,
        "height": c.height,
    } for c in rig.cameras]
    Path(path).write_text(json.dumps({"cameras": cams}, indent=1))


def read_rig_json(path) -> CameraRig:
    d = json.loads(Path(path).read_text())
    cams = [Camera(intrinsics=np.array(c["intrinsics"]),
                   extrinsic=np.array(c["extrinsic"]),
                   width=int(c["width"]), height=int(c["height"]))
            for c in d["cameras"]]
    return CameraRig(cams)


def write_boxes_json(path, boxes):
    """Boxes as 9-value records (x,y,z,l,h,w,yaw,vx,vy) plus class id."""
    rows = [{"box": [float(v) for v in b.nine()], "class_id": int(b.class_id)}
            for b in boxes]
    Path(path).write_text(json.dumps(rows, indent=1))


def read_boxes_json(path):
    rows = json.loads(Path(path).read_text())
    return [BBox3D.from_nine(np.array(r["box"], dtype=np.float64),
                             int(r["class_id"])) for r in rows]


def write_json(path, obj: dict):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def append_jsonl(path, obj: dict):
    with open(path, "a") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
