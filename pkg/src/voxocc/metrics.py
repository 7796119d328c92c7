"""Occupancy evaluation: per-class IoU, mean IoU, scene IoU, range bins.

Counts are exact integers accumulated from label grids. Mean IoU runs over
the semantic classes (free excluded unless asked for) with a fixed
denominator: classes that never appear in prediction or ground truth
contribute zero rather than shrinking the divisor. Scene IoU collapses
labels to occupied-vs-free first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .geometry import VoxelGridSpec


@dataclass
class ConfusionCounts:
    n_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    bin_tp: int = 0
    bin_fp: int = 0
    bin_fn: int = 0

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros(self.n_classes, dtype=np.int64)
            self.fp = np.zeros(self.n_classes, dtype=np.int64)
            self.fn = np.zeros(self.n_classes, dtype=np.int64)

    def add(self, other: "ConfusionCounts"):
        if other.n_classes != self.n_classes:
            raise ContractViolation("ConfusionCounts: class count mismatch")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.bin_tp += other.bin_tp
        self.bin_fp += other.bin_fp
        self.bin_fn += other.bin_fn


def confusion_counts(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                     mask: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Exact per-class and occupied-vs-free counts over (masked) voxels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(
            f"confusion_counts: pred {pred.shape} vs gt {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    if mask is not None:
        m = np.asarray(mask).reshape(-1).astype(bool)
        if m.shape != p.shape:
            raise ContractViolation("confusion_counts: mask shape mismatch")
        p, g = p[m], g[m]
    if p.size and (p.max() >= n_classes or g.max() >= n_classes
                   or p.min() < 0 or g.min() < 0):
        raise ContractViolation("confusion_counts: label out of range")
    joint = np.bincount(p * n_classes + g,
                        minlength=n_classes * n_classes)
    mat = joint.reshape(n_classes, n_classes)  # [pred, gt]
    diag = np.diag(mat)
    out = ConfusionCounts(n_classes=n_classes)
    out.tp = diag.copy()
    out.fp = mat.sum(axis=1) - diag
    out.fn = mat.sum(axis=0) - diag
    po = p != 0
    go = g != 0
    out.bin_tp = int(np.count_nonzero(po & go))
    out.bin_fp = int(np.count_nonzero(po & ~go))
    out.bin_fn = int(np.count_nonzero(~po & go))
    return out


@dataclass
class MetricsReport:
    n_classes: int
    per_class: list  # Optional[float] per class id; None when class absent
    miou: float
    scene_iou: float
    include_free: bool
    n_voxels: int = 0

    def table(self, class_names: Optional[Sequence[str]] = None) -> str:
        rows = []
        start = 0 if self.include_free else 1
        for c in range(start, self.n_classes):
            name = class_names[c] if class_names else f"class {c}"
            v = self.per_class[c]
            rows.append(f"  {name:<22} {'-' if v is None else f'{v:.4f}'}")
        rows.append(f"  {'mIoU':<22} {self.miou:.4f}")
        rows.append(f"  {'scene IoU (occupied)':<22} {self.scene_iou:.4f}")
        return "\n".join(rows)


def iou_report(counts: ConfusionCounts,
               include_free: bool = False) -> MetricsReport:
    """Per-class IoU plus the fixed-denominator mean and scene IoU."""
    per_class: list = []
    total = 0.0
    first = 0 if include_free else 1
    denom_classes = counts.n_classes - (0 if include_free else 1)
    for c in range(counts.n_classes):
        d = counts.tp[c] + counts.fp[c] + counts.fn[c]
        if d == 0:
            per_class.append(None)
            continue
        iou = counts.tp[c] / d
        per_class.append(float(iou))
        if c >= first:
            total += iou
    bden = counts.bin_tp + counts.bin_fp + counts.bin_fn
    scene = counts.bin_tp / bden if bden else 0.0
    return MetricsReport(
        n_classes=counts.n_classes, per_class=per_class,
        miou=total / denom_classes, scene_iou=float(scene),
        include_free=include_free)


def evaluate_grids(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                   include_free: bool = False) -> MetricsReport:
    rep = iou_report(confusion_counts(pred, gt, n_classes),
                     include_free=include_free)
    rep.n_voxels = int(np.asarray(pred).size)
    return rep


def range_mask(grid: VoxelGridSpec, radius: float) -> np.ndarray:
    """Voxels whose centre lies within the planar Chebyshev radius."""
    centers = grid.centers().reshape(grid.nx, grid.ny, grid.nz, 3)
    cheb = np.maximum(np.abs(centers[..., 0]), np.abs(centers[..., 1]))
    return cheb <= radius


def range_binned_metrics(pred: np.ndarray, gt: np.ndarray,
                         grid: VoxelGridSpec, radii: Sequence[float],
                         n_classes: int, include_free: bool = False):
    """Metrics restricted to growing Chebyshev ranges around the origin.

    Radii beyond the grid extent are clamped (the full grid is used) and a
    warning string is produced for each. Returns (list of (radius,
    MetricsReport), warnings).
    """
    max_extent = float(max(abs(grid.x_min), abs(grid.x_max),
                           abs(grid.y_min), abs(grid.y_max)))
    out = []
    warnings = []
    for r in radii:
        if r <= 0:
            raise ContractViolation(f"range radius must be positive, got {r}")
        eff = r
        if r > max_extent:
            warnings.append(
                f"range {r} m exceeds grid extent {max_extent} m; clamped")
            eff = max_extent
        m = range_mask(grid, eff)
        counts = confusion_counts(pred, gt, n_classes, mask=m)
        rep = iou_report(counts, include_free=include_free)
        rep.n_voxels = int(m.sum())
        out.append((float(r), rep))
    return out, warnings
