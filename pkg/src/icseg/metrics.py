"""Segmentation and video metrics: IoU, mIoU, FB-IoU, region similarity J,
boundary accuracy F, and sequence-level J&F."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

# Boundary tolerance as a fraction of the image diagonal (DAVIS convention).
DEFAULT_BOUNDARY_TOL = 0.008


class ShapeMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


def _as_pairs(preds, gts):
    preds = [np.asarray(p) for p in (preds if isinstance(preds, (list, tuple)) else [preds])]
    gts = [np.asarray(g) for g in (gts if isinstance(gts, (list, tuple)) else [gts])]
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    return preds, gts


@dataclass
class ConfusionTally:
    """Per-class intersection/union/pixel counts, mergeable across tiles."""

    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)
    pixels: dict[int, int] = field(default_factory=dict)

    def add(self, pred: np.ndarray, gt: np.ndarray, classes: Iterable[int]) -> None:
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
        for c in classes:
            p = pred == c
            g = gt == c
            self.intersection[c] = self.intersection.get(c, 0) + int((p & g).sum())
            self.union[c] = self.union.get(c, 0) + int((p | g).sum())
            self.pixels[c] = self.pixels.get(c, 0) + int(g.sum())

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        out = ConfusionTally(dict(self.intersection), dict(self.union), dict(self.pixels))
        for c in other.union:
            out.intersection[c] = out.intersection.get(c, 0) + other.intersection[c]
            out.union[c] = out.union.get(c, 0) + other.union[c]
            out.pixels[c] = out.pixels.get(c, 0) + other.pixels[c]
        return out

    def per_class_iou(self) -> dict[int, float]:
        """IoU per class; classes absent from both pred and gt are dropped."""
        return {
            c: self.intersection[c] / self.union[c]
            for c in sorted(self.union)
            if self.union[c] > 0
        }

    def miou(self) -> float:
        ious = self.per_class_iou()
        if not ious:
            return float("nan")
        return float(np.mean(list(ious.values())))


def miou(preds, gts, class_set: Iterable[int]) -> float:
    """Mean IoU over `class_set`, intersections/unions pooled across pairs.

    Classes absent from both prediction and ground truth everywhere are
    excluded from the mean.
    """
    class_set = sorted(set(int(c) for c in class_set))
    if not class_set:
        raise ValueError("class_set must be non-empty")
    preds, gts = _as_pairs(preds, gts)
    tally = ConfusionTally()
    for p, g in zip(preds, gts):
        tally.add(p, g, class_set)
    return tally.miou()


def fb_iou(preds, gts) -> float:
    """Mean of foreground IoU and background IoU over binary masks."""
    preds, gts = _as_pairs(preds, gts)
    fg_i = fg_u = bg_i = bg_u = 0
    for p, g in zip(preds, gts):
        p = p.astype(bool)
        g = g.astype(bool)
        fg_i += int((p & g).sum())
        fg_u += int((p | g).sum())
        bg_i += int((~p & ~g).sum())
        bg_u += int((~p | ~g).sum())
    fg = fg_i / fg_u if fg_u else 1.0
    bg = bg_i / bg_u if bg_u else 1.0
    return (fg + bg) / 2.0


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary IoU; both-empty scores 1 (match by absence)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Boundary = mask XOR its 1-px erosion (4-connectivity, image border erodes)."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    return mask ^ ndimage.binary_erosion(mask, border_value=0)


def boundary_f(pred_mask: np.ndarray, gt_mask: np.ndarray, tol: float = DEFAULT_BOUNDARY_TOL) -> float:
    """Boundary F-measure at a tolerance given as a fraction of the diagonal.

    Precision counts predicted boundary pixels within reach of any ground
    truth boundary pixel; recall is symmetric; F = 2PR/(P+R).  Both masks
    empty scores 1.
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    gt_mask = np.asarray(gt_mask).astype(bool)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} vs {gt_mask.shape}")
    if not pred_mask.any() and not gt_mask.any():
        return 1.0
    pb = boundary_pixels(pred_mask)
    gb = boundary_pixels(gt_mask)
    if not pb.any() or not gb.any():
        return 0.0
    h, w = pred_mask.shape
    reach = tol * np.sqrt(h * h + w * w)
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= reach).mean())
    recall = float((dist_to_pred[gb] <= reach).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_score(
    pred_sequence: Sequence[np.ndarray],
    gt_sequence: Sequence[np.ndarray],
    tol: float = DEFAULT_BOUNDARY_TOL,
) -> tuple[float, float, float]:
    """Sequence-level (J, F, J&F) averaged over frames and objects.

    Frame 0 is excluded (it is given).  Objects are the nonzero ids present
    anywhere in the ground truth sequence.
    """
    if len(pred_sequence) != len(gt_sequence):
        raise LengthMismatch(f"{len(pred_sequence)} vs {len(gt_sequence)} frames")
    preds = [np.asarray(p) for p in pred_sequence]
    gts = [np.asarray(g) for g in gt_sequence]
    ids = sorted({int(i) for g in gts for i in np.unique(g) if i != 0})
    if not ids or len(preds) < 2:
        return 1.0, 1.0, 1.0
    j_vals = []
    f_vals = []
    for obj in ids:
        for p, g in zip(preds[1:], gts[1:]):
            j_vals.append(mask_iou(p == obj, g == obj))
            pm, gm = p == obj, g == obj
            if not pm.any() and not gm.any():
                f_vals.append(1.0)
            else:
                f_vals.append(boundary_f(pm, gm, tol))
    j = float(np.mean(j_vals))
    f = float(np.mean(f_vals))
    return j, f, (j + f) / 2.0
