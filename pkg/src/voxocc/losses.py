"""Training objectives: focal, Lovasz-softmax, scene affinity, box matching.

The occupancy side runs at every decoder scale with weight 2^-l (l = 1 at
the finest scale): focal + Lovasz + geometric affinity + semantic affinity,
accumulated in that order so the reported totals are reproducible float for
float. The detection side matches predictions to ground truth per
supervised head (Hungarian on -p_class + 0.25 * L1) and sums focal + L1
over all heads. The combined objective is detection + lambda * occupancy.

All loss functions take probabilities (not logits) plus integer targets and
return tape-connected scalars; probabilities are clamped at 1e-12 before
any log, and a clamp event is surfaced in the report.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ops
from .errors import ContractViolation
from .tensor import Tensor

PROB_FLOOR = 1e-12


def _check_probs_targets(op, probs, targets):
    if probs.ndim != 2:
        raise ContractViolation(f"{op}: probs must be (N, C), got "
                                f"{probs.shape}")
    targets = np.asarray(targets)
    if targets.shape != (probs.shape[0],):
        raise ContractViolation(f"{op}: targets {targets.shape} vs probs "
                                f"{probs.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        targets = targets.astype(np.int64)
    if targets.size and (targets.min() < 0
                         or targets.max() >= probs.shape[1]):
        raise ContractViolation(f"{op}: target class out of range")
    return targets


def focal_loss(probs: Tensor, targets, gamma: float = 2.0,
               alpha: float = 1.0, class_mean: bool = False):
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t).

    class_mean=False averages over samples; class_mean=True averages within
    each class present in the targets, then across those classes. Returns
    (loss, clamped) where clamped reports whether the probability floor was
    hit.
    """
    targets = _check_probs_targets("focal_loss", probs, targets)
    n, c = probs.shape
    flat_idx = np.arange(n, dtype=np.int64) * c + targets
    p_t = ops.take_flat(probs, flat_idx)
    clamped = bool((p_t.data < PROB_FLOOR).any())
    p_t = ops.clamp(p_t, lo=PROB_FLOOR)
    one_m = ops.add_scalar(ops.neg(p_t), 1.0)
    terms = ops.mul_scalar(
        ops.mul(ops.pow_scalar(one_m, gamma), ops.log(p_t)), -alpha)
    if not class_mean:
        return ops.mean(terms), clamped
    per_class = []
    for cls in np.unique(targets):
        idx = np.nonzero(targets == cls)[0]
        per_class.append(ops.reshape(ops.mean(ops.gather_rows(terms, idx)),
                                     (1,)))
    return ops.mean(ops.concat(per_class, axis=0)), clamped


def lovasz_grad_vector(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension along sorted errors."""
    gts = fg_sorted.sum()
    cum = np.cumsum(fg_sorted)
    inter = gts - cum
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    if fg_sorted.size > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, targets) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over present classes.

    Per class: errors are |fg - p_c|, sorted descending (stable), dotted
    with the Jaccard-extension gradient of that ordering.
    """
    targets = _check_probs_targets("lovasz_softmax", probs, targets)
    n, c = probs.shape
    losses = []
    for cls in np.unique(targets):
        fg = (targets == cls).astype(probs.dtype)
        p_c = ops.take_flat(
            probs, np.arange(n, dtype=np.int64) * c + int(cls))
        errors = ops.absolute(ops.sub(ops.const(fg), p_c))
        order = np.argsort(-errors.data, kind="stable")
        sorted_err = ops.gather_rows(errors, order)
        grad = lovasz_grad_vector(fg[order].astype(np.float64))
        losses.append(ops.reshape(
            ops.sum(ops.mul(sorted_err,
                            ops.const(grad, dtype=probs.dtype.type))), (1,)))
    return ops.mean(ops.concat(losses, axis=0))


def _affinity_terms(p: Tensor, y: np.ndarray):
    """-log of soft precision / recall / specificity for one class."""
    n = y.shape[0]
    pos = float(y.sum())
    yc = ops.const(y.astype(p.dtype))
    terms = []
    if pos > 0:
        tp = ops.sum(ops.mul(p, yc))
        precision = ops.div(tp, ops.clamp(ops.sum(p), lo=PROB_FLOOR))
        recall = ops.mul_scalar(tp, 1.0 / pos)
        terms.append(ops.neg(ops.log(ops.clamp(precision, lo=PROB_FLOOR))))
        terms.append(ops.neg(ops.log(ops.clamp(recall, lo=PROB_FLOOR))))
    if pos < n:
        inv_p = ops.add_scalar(ops.neg(p), 1.0)
        inv_y = ops.const((1.0 - y).astype(p.dtype))
        tn = ops.sum(ops.mul(inv_p, inv_y))
        spec = ops.mul_scalar(tn, 1.0 / (n - pos))
        terms.append(ops.neg(ops.log(ops.clamp(spec, lo=PROB_FLOOR))))
    return terms


def scene_affinity_loss(probs: Tensor, targets, mode: str) -> Tensor:
    """Scene-wise class affinity via soft precision/recall/specificity.

    mode='geometry' collapses everything to occupied-vs-free; mode
    ='semantics' runs one class at a time. Per class the available terms
    (precision and recall need positives, specificity needs negatives) are
    summed, then averaged over classes that contributed anything.
    """
    targets = _check_probs_targets("scene_affinity_loss", probs, targets)
    n, c = probs.shape
    entries = []
    if mode == "geometry":
        p_free = ops.reshape(ops.slice_axis(probs, 1, 0, 1), (n,))
        p_occ = ops.add_scalar(ops.neg(p_free), 1.0)
        entries.append((p_occ, (targets != 0).astype(np.float64)))
    elif mode == "semantics":
        for cls in range(c):
            p_c = ops.reshape(ops.slice_axis(probs, 1, cls, cls + 1), (n,))
            entries.append((p_c, (targets == cls).astype(np.float64)))
    else:
        raise ContractViolation(f"scene_affinity_loss: bad mode '{mode}'")
    per_class = []
    for p, y in entries:
        terms = _affinity_terms(p, y)
        if not terms:
            continue
        acc = terms[0]
        for t in terms[1:]:
            acc = ops.add(acc, t)
        per_class.append(ops.reshape(acc, (1,)))
    if not per_class:
        raise ContractViolation("scene_affinity_loss: no usable class")
    return ops.mean(ops.concat(per_class, axis=0))


def downsample_labels(labels: np.ndarray, factor: int = 2) -> np.ndarray:
    """Majority vote over factor^3 blocks; any occupied class beats free,
    count ties go to the lowest class id."""
    labels = np.asarray(labels)
    f = int(factor)
    x, y, z = labels.shape
    if x % f or y % f or z % f:
        raise ContractViolation(
            f"downsample_labels: {labels.shape} not divisible by {f}")
    blocks = labels.reshape(x // f, f, y // f, f, z // f, f)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(-1, f ** 3)
    n_classes = int(labels.max()) + 1
    counts = np.zeros((blocks.shape[0], max(n_classes, 2)), dtype=np.int64)
    for j in range(blocks.shape[1]):
        np.add.at(counts, (np.arange(blocks.shape[0]), blocks[:, j]), 1)
    occupied = counts[:, 1:]
    any_occ = occupied.sum(axis=1) > 0
    maj = occupied.argmax(axis=1) + 1
    out = np.where(any_occ, maj, 0).astype(labels.dtype)
    return out.reshape(x // f, y // f, z // f)


def occupancy_target_pyramid(labels: np.ndarray, n_scales: int):
    """Scale-0 labels plus repeated 2x majority downsamples."""
    out = [np.asarray(labels)]
    for _ in range(n_scales - 1):
        out.append(downsample_labels(out[-1], 2))
    return out


@dataclass
class LossReport:
    total: float = 0.0
    terms: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def merge(self, other: "LossReport"):
        self.terms.update(other.terms)
        self.warnings.extend(other.warnings)


def _flatten_volume_probs(logits: Tensor) -> Tensor:
    """(Cls, nx, ny, nz) logits -> (V, Cls) probabilities."""
    c = logits.shape[0]
    flat = ops.reshape(ops.transpose(logits, (1, 2, 3, 0)), (-1, c))
    return ops.softmax(flat, axis=1)


def occupancy_loss(logit_scales: Sequence[Tensor],
                   target_scales: Sequence[np.ndarray],
                   gamma: float = 2.0, alpha: float = 1.0):
    """Scale-weighted sum of the four occupancy terms.

    Scale l (1-based, finest first) contributes
    2^-l * (focal + lovasz + geometric affinity + semantic affinity).
    Returns (total Tensor, LossReport).
    """
    if len(logit_scales) != len(target_scales):
        raise ContractViolation("occupancy_loss: scale count mismatch")
    report = LossReport()
    total = None
    for i, (logits, target) in enumerate(zip(logit_scales, target_scales)):
        if logits.shape[1:] != target.shape:
            raise ContractViolation(
                f"occupancy_loss: logits {logits.shape} vs target "
                f"{target.shape} at scale {i}")
        probs = _flatten_volume_probs(logits)
        t = np.asarray(target).reshape(-1)
        focal, clamped = focal_loss(probs, t, gamma=gamma, alpha=alpha,
                                    class_mean=True)
        if clamped:
            report.warnings.append(f"focal probability floor hit at scale "
                                   f"{i + 1}")
        lov = lovasz_softmax(probs, t)
        geo = scene_affinity_loss(probs, t, "geometry")
        sem = scene_affinity_loss(probs, t, "semantics")
        term = ops.add(ops.add(ops.add(focal, lov), geo), sem)
        scaled = ops.mul_scalar(term, 2.0 ** (-(i + 1)))
        total = scaled if total is None else ops.add(total, scaled)
        pre = f"occ/scale{i + 1}"
        report.terms[f"{pre}/focal"] = focal.item()
        report.terms[f"{pre}/lovasz"] = lov.item()
        report.terms[f"{pre}/geo_affinity"] = geo.item()
        report.terms[f"{pre}/sem_affinity"] = sem.item()
    report.terms["occ/total"] = total.item()
    report.total = total.item()
    return total, report


@dataclass
class MatchResult:
    query_idx: np.ndarray
    gt_idx: np.ndarray
    total_cost: float


def match_cost_matrix(class_probs: np.ndarray, boxes: np.ndarray,
                      gt_boxes: np.ndarray, gt_classes: np.ndarray,
                      w_class: float = 1.0, w_box: float = 0.25) -> np.ndarray:
    """(M, G) assignment costs: -p[gt class] weighted plus L1 box distance."""
    cls_cost = -class_probs[:, gt_classes]
    box_cost = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    return w_class * cls_cost + w_box * box_cost


def hungarian_match(class_probs: np.ndarray, boxes: np.ndarray,
                    gt_boxes: np.ndarray, gt_classes: np.ndarray,
                    w_class: float = 1.0, w_box: float = 0.25) -> MatchResult:
    """Optimal one-to-one assignment of queries to ground-truth boxes."""
    g = gt_boxes.shape[0]
    if g == 0:
        return MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)
    if g > class_probs.shape[0]:
        raise ContractViolation(
            f"hungarian_match: {g} ground-truth boxes for "
            f"{class_probs.shape[0]} queries")
    cost = match_cost_matrix(class_probs, boxes, gt_boxes, gt_classes,
                             w_class, w_box)
    q_idx, g_idx = linear_sum_assignment(cost)
    order = np.argsort(g_idx)
    q_idx, g_idx = q_idx[order], g_idx[order]
    return MatchResult(q_idx.astype(np.int64), g_idx.astype(np.int64),
                       float(cost[q_idx, g_idx].sum()))


def detection_head_loss(class_logits: Tensor, boxes: Tensor,
                        gt_boxes: np.ndarray, gt_classes: np.ndarray,
                        gamma: float = 2.0, alpha: float = 0.25,
                        w_class: float = 1.0, w_box: float = 0.25):
    """Focal + matched-pair L1 for one supervised head.

    Unmatched queries are supervised toward the background class (last
    column). Returns (loss Tensor, focal value, l1 value, MatchResult).
    """
    m, k1 = class_logits.shape
    probs = ops.softmax(class_logits, axis=1)
    match = hungarian_match(probs.data, boxes.data, gt_boxes, gt_classes,
                            w_class, w_box)
    targets = np.full(m, k1 - 1, dtype=np.int64)
    targets[match.query_idx] = gt_classes[match.gt_idx]
    focal, _ = focal_loss(probs, targets, gamma=gamma, alpha=alpha,
                          class_mean=False)
    if match.gt_idx.size:
        pred = ops.gather_rows(boxes, match.query_idx)
        diff = ops.absolute(ops.sub(pred,
                                    ops.const(gt_boxes[match.gt_idx],
                                              dtype=boxes.dtype.type)))
        l1 = ops.mean(ops.sum(diff, axis=1))
        loss = ops.add(focal, l1)
        return loss, focal.item(), l1.item(), match
    return focal, focal.item(), 0.0, match


def detection_loss(outputs, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                   gamma: float = 2.0, alpha: float = 0.25,
                   w_class: float = 1.0, w_box: float = 0.25):
    """Sum of per-head losses over every supervised head output."""
    if not outputs:
        raise ContractViolation("detection_loss: no head outputs")
    report = LossReport()
    total = None
    for out in outputs:
        loss, f_val, l1_val, _ = detection_head_loss(
            out.class_logits, out.boxes, gt_boxes, gt_classes,
            gamma=gamma, alpha=alpha, w_class=w_class, w_box=w_box)
        total = loss if total is None else ops.add(total, loss)
        pre = f"det/layer{out.layer + 1}/{out.module}"
        report.terms[f"{pre}/focal"] = f_val
        report.terms[f"{pre}/l1"] = l1_val
    report.terms["det/total"] = total.item()
    report.total = total.item()
    return total, report


def combined_loss(det_total: Optional[Tensor], occ_total: Tensor,
                  lam: float = 2.0) -> Tensor:
    """detection + lambda * occupancy; detection may be absent."""
    weighted = ops.mul_scalar(occ_total, lam)
    if det_total is None:
        return weighted
    return ops.add(det_total, weighted)
