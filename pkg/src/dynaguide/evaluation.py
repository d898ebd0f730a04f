"""Unsupervised segmentation scoring: IoU-maximising one-to-one matching of clusters to classes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import InputError
from .validation import check_label_map

_TIE_TOL = 1e-9


def confusion(pred, gt, n_pred: int | None = None, n_gt: int | None = None) -> np.ndarray:
    """``C[i, j]`` = number of pixels with prediction ``i`` and ground truth ``j``."""
    pred = check_label_map(pred, name="prediction")
    gt = check_label_map(gt, name="ground truth")
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    n_pred = int(pred.max()) + 1 if n_pred is None else n_pred
    n_gt = int(gt.max()) + 1 if n_gt is None else n_gt
    flat = pred.ravel() * n_gt + gt.ravel()
    return np.bincount(flat, minlength=n_pred * n_gt).reshape(n_pred, n_gt)


def iou_matrix(conf: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    inter = conf
    union = conf.sum(axis=1, keepdims=True) + conf.sum(axis=0, keepdims=True) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _best_total(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum())


def hungarian_match(iou) -> list[tuple[int, int]]:
    """Maximum-total one-to-one assignment of rows (predictions) to columns (classes).

    Rectangular input is padded with zero-valued dummies, whose pairings are
    dropped. Among optimal assignments the lexicographically smallest one
    (by row, then column) is returned.
    """
    m = np.asarray(iou, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise InputError(f"hungarian_match needs a non-empty 2-D matrix, got shape {m.shape}")
    n_rows, n_cols = m.shape
    n = max(n_rows, n_cols)
    square = np.zeros((n, n))
    square[:n_rows, :n_cols] = m
    target = _best_total(square)

    rows_left = list(range(n))
    cols_left = list(range(n))
    chosen: list[tuple[int, int]] = []
    gained = 0.0
    for i in range(n):
        rows_left.remove(i)
        for j in cols_left:
            rest_cols = [c for c in cols_left if c != j]
            rest = _best_total(square[np.ix_(rows_left, rest_cols)])
            if gained + square[i, j] + rest >= target - _TIE_TOL:
                chosen.append((i, j))
                gained += square[i, j]
                cols_left.remove(j)
                break
        else:  # pragma: no cover - unreachable for a finite matrix
            raise AssertionError("no feasible column found")
    return [(i, j) for i, j in chosen if i < n_rows and j < n_cols]


def assignment_total(iou, pairs) -> float:
    """Correctly rounded sum of the paired entries (independent of pair order)."""
    m = np.asarray(iou, dtype=np.float64)
    return math.fsum(m[i, j] for i, j in pairs)


@dataclass
class EvalReport:
    confusion: np.ndarray
    pred_ids: np.ndarray
    gt_ids: np.ndarray
    assignment: dict[int, int]
    per_class_iou: dict[int, float]
    miou: float
    pacc: float

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pacc": self.pacc,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "assignment": [[int(p), int(g)] for p, g in sorted(self.assignment.items())],
            "confusion": self.confusion.tolist(),
            "pred_ids": self.pred_ids.tolist(),
            "gt_ids": self.gt_ids.tolist(),
        }


def _compact(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ids, inverse = np.unique(labels, return_inverse=True)
    return ids, inverse.reshape(labels.shape)


def evaluate(pred, gt) -> EvalReport:
    """Match clusters to ground-truth classes and score mIoU and pixel accuracy.

    mIoU averages over the classes present in ``gt``; a class left without a
    matched cluster counts as IoU 0.
    """
    pred = check_label_map(pred, name="prediction")
    gt = check_label_map(gt, name="ground truth")
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    pred_ids, pred_c = _compact(pred)
    gt_ids, gt_c = _compact(gt)
    conf = confusion(pred_c, gt_c, len(pred_ids), len(gt_ids))
    iou = iou_matrix(conf)
    pairs = hungarian_match(iou)
    union = conf.sum(axis=1, keepdims=True) + conf.sum(axis=0, keepdims=True) - conf
    # IoUs are ratios of pixel counts, so the mean is taken exactly and rounded once
    exact = {int(g): Fraction(0) for g in gt_ids}
    assignment = {}
    matched_pixels = 0
    for i, j in pairs:
        assignment[int(pred_ids[i])] = int(gt_ids[j])
        if conf[i, j]:
            exact[int(gt_ids[j])] = Fraction(int(conf[i, j]), int(union[i, j]))
        matched_pixels += int(conf[i, j])
    per_class = {g: float(v) for g, v in exact.items()}
    miou = float(sum(exact.values()) / len(exact))
    return EvalReport(conf, pred_ids, gt_ids, assignment, per_class, miou,
                      matched_pixels / pred.size)


@dataclass
class MultiAnnotationReport:
    all: float
    fine: float
    coarse: float
    mean: float
    fine_index: int
    coarse_index: int
    reports: list[EvalReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "all": self.all, "fine": self.fine, "coarse": self.coarse, "mean": self.mean,
            "fine_index": self.fine_index, "coarse_index": self.coarse_index,
            "annotations": [r.to_dict() for r in self.reports],
        }


def evaluate_multi(pred, gts) -> MultiAnnotationReport:
    """Score against several annotations of one image.

    ``fine`` uses the annotation with the most segments, ``coarse`` the one with
    the fewest (first wins on ties), ``all`` averages every annotation and
    ``mean`` averages those three numbers.
    """
    gts = list(gts)
    if not gts:
        raise InputError("evaluate_multi needs at least one annotation")
    reports = [evaluate(pred, g) for g in gts]
    counts = [len(r.gt_ids) for r in reports]
    fine_i = int(np.argmax(counts))
    coarse_i = int(np.argmin(counts))
    all_ = float(np.mean([r.miou for r in reports]))
    fine = reports[fine_i].miou
    coarse = reports[coarse_i].miou
    return MultiAnnotationReport(all_, fine, coarse, (all_ + fine + coarse) / 3.0,
                                 fine_i, coarse_i, reports)


def dataset_miou(preds, gts, mode: str = "per_image") -> float:
    """Dataset-level mIoU.

    ``per_image`` averages per-image mIoU. ``pooled`` sums one global
    confusion matrix (cluster ids assumed consistent across images) and
    matches once.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise InputError("need equally many, and at least one, predictions and ground truths")
    if mode == "per_image":
        return float(np.mean([evaluate(p, g).miou for p, g in zip(preds, gts)]))
    if mode != "pooled":
        raise InputError(f"unknown aggregation mode {mode!r}")
    n_pred = max(int(np.max(p)) for p in preds) + 1
    n_gt = max(int(np.max(g)) for g in gts) + 1
    conf = sum(confusion(p, g, n_pred, n_gt) for p, g in zip(preds, gts))
    present = conf.sum(axis=0) > 0
    conf = conf[conf.sum(axis=1) > 0][:, present]
    iou = iou_matrix(conf)
    pairs = hungarian_match(iou)
    per_class = np.zeros(conf.shape[1])
    for i, j in pairs:
        per_class[j] = iou[i, j]
    return float(per_class.mean())
