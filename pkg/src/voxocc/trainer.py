"""Training and evaluation loops.

Everything that could make two identical invocations diverge is pinned: the
model seed controls initialization, augmentation draws from its own
dedicated stream, samples are visited round-robin, and log lines carry no
wall-clock state. Two runs with the same config and data produce identical
logs and checkpoints byte for byte (per kernel backend).
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .config import RunConfig
from .errors import ContractViolation, NumericError
from .image_encoder import grid_mask
from .losses import (combined_loss, detection_loss, occupancy_loss,
                     occupancy_target_pyramid)
from .metrics import (ConfusionCounts, MetricsReport, confusion_counts,
                      iou_report, range_mask)
from .model import OccupancyModel, detection_targets
from .optim import AdamW
from .synth import Sample
from .tensor import Tape, Tensor
from .view_transform import ViewTransform, build_view_transform


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    log: list = field(default_factory=list)
    checkpoint_path: str = ""


def build_or_load_vt(config: RunConfig, rig, cache_path=None) -> ViewTransform:
    """Build the lift matrices, or reuse a cache file when it matches."""
    from .view_transform import (load_view_transform, rig_signature,
                                 save_view_transform)
    if cache_path is not None and Path(cache_path).exists():
        vt = load_view_transform(cache_path)
        if vt.rig_hash == rig_signature(rig, config.grid):
            return vt
    vt = build_view_transform(rig, config.grid, n_levels=config.n_levels)
    if cache_path is not None:
        save_view_transform(cache_path, vt)
    return vt


def _loss_line(step: int, total: float, report_terms: dict) -> dict:
    line = {"step": step, "total": float(total)}
    for k, v in sorted(report_terms.items()):
        line[k] = float(v)
    return line


def train(config: RunConfig, samples: list[Sample], out_dir,
          steps: int = None, quiet: bool = False) -> TrainResult:
    if not samples:
        raise ContractViolation("train: empty sample list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = config.steps if steps is None else int(steps)
    if steps < 0:
        raise ContractViolation("train: steps must be >= 0")

    model = OccupancyModel(config)
    model.train()
    opt = AdamW(model.parameters(), lr=config.lr,
                betas=(config.beta1, config.beta2), eps=config.adam_eps,
                weight_decay=config.weight_decay)
    rig = samples[0].rig
    vt = build_or_load_vt(config, rig, out_dir / "lift.ivtm")

    n_scales = OccupancyModel.N_DECODER_SCALES
    target_pyrs = [occupancy_target_pyramid(s.occupancy, n_scales)
                   for s in samples]
    det_gts = [detection_targets(s.boxes) for s in samples]

    aug_rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    log = []

    for step in range(steps):
        sample_i = step % len(samples)
        sample = samples[sample_i]
        with Tape() as tape:
            images = Tensor(sample.images)
            if config.grid_mask_prob > 0:
                images = grid_mask(images, aug_rng,
                                   prob=config.grid_mask_prob,
                                   ratio=config.grid_mask_ratio)
            out = model.forward(images, vt, rig)
            occ_total, occ_rep = occupancy_loss(
                out.logits, target_pyrs[sample_i],
                gamma=config.focal_gamma_occ, alpha=config.focal_alpha_occ)
            det_total = None
            terms = dict(occ_rep.terms)
            if out.det:
                gt9, gtc = det_gts[sample_i]
                det_total, det_rep = detection_loss(
                    out.det, gt9, gtc, gamma=config.focal_gamma_det,
                    alpha=config.focal_alpha_det,
                    w_class=config.match_w_class, w_box=config.match_w_box)
                terms.update(det_rep.terms)
            total = combined_loss(det_total, occ_total, config.lambda_occ)
        total_val = total.item()
        if not np.isfinite(total_val):
            bad = next((k for k, v in terms.items()
                        if not np.isfinite(v)), "total")
            raise NumericError("train", f"non-finite loss at step {step}, "
                                        f"first non-finite term {bad}")
        opt.zero_grad()
        tape.backward(total)
        opt.step()
        line = _loss_line(step, total_val, terms)
        log.append(line)
        fileio.append_jsonl(log_path, line)
        if not quiet and (step % max(1, config.log_every) == 0
                          or step == steps - 1):
            det_s = f" det={terms.get('det/total', 0.0):.4f}" \
                if "det/total" in terms else ""
            print(f"step {step:5d} total={total_val:.4f}"
                  f" occ={terms['occ/total']:.4f}{det_s}", file=sys.stderr)

    ckpt = out_dir / "model.ckpt"
    fileio.write_checkpoint(ckpt, model.state_dict())
    config.to_json(out_dir / "config.json")
    final = log[-1]["total"] if log else float("nan")
    return TrainResult(steps=steps, final_loss=final, log=log,
                       checkpoint_path=str(ckpt))


def smoothed(values, window: int = 25) -> np.ndarray:
    """Trailing-window mean, same length as the input."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(v.size):
        out[i] = v[max(0, i - window + 1):i + 1].mean()
    return out


@dataclass
class EvalResult:
    report: MetricsReport
    per_range: list  # (radius, MetricsReport) pairs
    warnings: list
    n_scenes: int

    def to_dict(self) -> dict:
        def rep_dict(rep):
            return {"per_class": rep.per_class, "miou": rep.miou,
                    "scene_iou": rep.scene_iou, "n_voxels": rep.n_voxels,
                    "include_free": rep.include_free}
        return {
            "n_scenes": self.n_scenes,
            "overall": rep_dict(self.report),
            "per_range": [{"radius": r, **rep_dict(rep)}
                          for r, rep in self.per_range],
            "warnings": self.warnings,
        }


def evaluate(config: RunConfig, samples: list[Sample], checkpoint_path,
             radii=(2.0, 5.0, 10.0), include_free: bool = False,
             oracle_pred: bool = False) -> EvalResult:
    """Aggregate confusion over samples, overall and per range radius.

    oracle_pred swaps the model prediction for the labels themselves, the
    self-evaluation baseline (mIoU exactly 1); no checkpoint is read.
    """
    if not samples:
        raise ContractViolation("evaluate: empty sample list")
    if oracle_pred:
        model = vt = None
    else:
        model = OccupancyModel(config)
        model.load_state_dict(fileio.read_checkpoint(checkpoint_path))
        rig = samples[0].rig
        vt = build_or_load_vt(config, rig)
    grid = config.grid
    total = ConfusionCounts(n_classes=config.n_classes)
    preds = []
    for s in samples:
        pred = s.occupancy if oracle_pred \
            else model.predict_labels(s.images, vt, s.rig)
        preds.append(pred)
        total.add(confusion_counts(pred, s.occupancy, config.n_classes))
    overall = iou_report(total, include_free=include_free)
    overall.n_voxels = int(sum(p.size for p in preds))

    max_extent = float(max(abs(grid.x_min), abs(grid.x_max),
                           abs(grid.y_min), abs(grid.y_max)))
    per_range = []
    warnings: list[str] = []
    for r in radii:
        eff = float(r)
        if eff > max_extent:
            warnings.append(
                f"range {r} m exceeds grid extent {max_extent} m; clamped")
            eff = max_extent
        mask = range_mask(grid, eff)
        agg = ConfusionCounts(n_classes=config.n_classes)
        for s, pred in zip(samples, preds):
            agg.add(confusion_counts(pred, s.occupancy, config.n_classes,
                                     mask=mask))
        rep = iou_report(agg, include_free=include_free)
        rep.n_voxels = int(mask.sum()) * len(samples)
        per_range.append((float(r), rep))
    return EvalResult(report=overall, per_range=per_range,
                      warnings=warnings, n_scenes=len(samples))
