"""Pixel IoU (with and without the restored border) and per-object matching."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from cityseg.errors import ValidationError
from cityseg.raster import INTERIOR, InstanceMap, as_classmap


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def pixel_confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _same_shape(pred, gt, "pixel_confusion")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(gt)) - tp
    return ConfusionMatrix(tp, fp, fn, pred.size - tp - fp - fn)


def iou(cm: ConfusionMatrix) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    denom = cm.tp + cm.fp + cm.fn
    return 1.0 if denom == 0 else cm.tp / denom


def evaluate_modes(pred_cm: np.ndarray, pred_inst: InstanceMap, gt_inst: InstanceMap) -> dict:
    """IoU of the bare interior class and of the border-restored instances,
    both against the full ground-truth vehicle mask."""
    pred_cm = as_classmap(pred_cm)
    gt_mask = gt_inst.labels != 0
    _same_shape(pred_cm, gt_mask, "evaluate_modes")
    _same_shape(pred_inst.labels, gt_mask, "evaluate_modes")
    no_border = pixel_confusion(pred_cm == INTERIOR, gt_mask)
    exp_border = pixel_confusion(pred_inst.labels != 0, gt_mask)
    return {
        "iou_no_border": iou(no_border),
        "iou_exp_border": iou(exp_border),
        "confusion_no_border": asdict(no_border),
        "confusion_exp_border": asdict(exp_border),
    }


@dataclass(frozen=True)
class MatchConfig:
    tau_correct: float = 0.5
    tau_partial: float = 0.1

    def __post_init__(self):
        if not 0 < self.tau_partial < self.tau_correct <= 1:
            raise ValidationError(f"need 0 < tau_partial < tau_correct <= 1, got {self.tau_partial}, {self.tau_correct}")


@dataclass
class ObjectReport:
    correct: int = 0
    partial: int = 0
    false_negatives: int = 0
    false_positives: int = 0
    matches: list[tuple[int, int, float]] = field(default_factory=list)

    def counts(self) -> dict:
        return {
            "correct": self.correct,
            "partial": self.partial,
            "false_negatives": self.false_negatives,
            "false_positives": self.false_positives,
        }


def pairwise_iou(pred: InstanceMap, gt: InstanceMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(pred_ids, gt_ids, ious)`` for every pair of overlapping instances."""
    p, g = pred.labels.ravel(), gt.labels.ravel()
    _same_shape(pred.labels, gt.labels, "pairwise_iou")
    both = (p != 0) & (g != 0)
    key = p[both].astype(np.int64) * (gt.n_instances + 1) + g[both]
    keys, inter = np.unique(key, return_counts=True)
    pid, gid = keys // (gt.n_instances + 1), keys % (gt.n_instances + 1)
    pa = np.bincount(p, minlength=pred.n_instances + 1)
    ga = np.bincount(g, minlength=gt.n_instances + 1)
    ious = inter / (pa[pid] + ga[gid] - inter)
    return pid, gid, ious


def per_object(pred: InstanceMap, gt: InstanceMap, cfg: MatchConfig = MatchConfig()) -> ObjectReport:
    """Classify predicted and ground-truth objects.

    Pairs with IoU >= ``tau_correct`` are matched greedily by descending IoU
    (ties: lower gt id, then lower pred id), one-to-one, and count as
    correct.  Every other prediction is partial if its best IoU with any gt
    exceeds ``tau_partial``, else a false positive.  A gt object is a false
    negative unless it was matched or a partial prediction overlaps it with
    IoU above ``tau_partial``.
    """
    pid, gid, ious = pairwise_iou(pred, gt)
    report = ObjectReport()
    order = np.lexsort((pid, gid, -ious))
    pred_done = np.zeros(pred.n_instances + 1, dtype=bool)
    gt_done = np.zeros(gt.n_instances + 1, dtype=bool)
    for k in order:
        if ious[k] < cfg.tau_correct:
            break
        p, g = int(pid[k]), int(gid[k])
        if pred_done[p] or gt_done[g]:
            continue
        pred_done[p] = gt_done[g] = True
        report.matches.append((p, g, float(ious[k])))
    report.correct = len(report.matches)

    best = np.zeros(pred.n_instances + 1)
    np.maximum.at(best, pid, ious)
    remaining = ~pred_done[1:]
    partial = remaining & (best[1:] > cfg.tau_partial)
    report.partial = int(np.count_nonzero(partial))
    report.false_positives = int(np.count_nonzero(remaining & ~partial))

    covered = gt_done.copy()
    partial_ids = np.flatnonzero(partial) + 1
    hit = np.isin(pid, partial_ids) & (ious > cfg.tau_partial)
    covered[gid[hit]] = True
    report.false_negatives = int(np.count_nonzero(~covered[1:]))
    return report


def evaluation_report(
    pred_cm: np.ndarray, pred_inst: InstanceMap, gt_inst: InstanceMap, cfg: MatchConfig = MatchConfig()
) -> dict:
    """Everything the ``evaluate`` command prints, JSON-ready."""
    modes = evaluate_modes(pred_cm, pred_inst, gt_inst)
    obj = per_object(pred_inst, gt_inst, cfg)
    return {
        "iou_no_border": modes["iou_no_border"],
        "iou_exp_border": modes["iou_exp_border"],
        "confusion": {
            "no_border": modes["confusion_no_border"],
            "exp_border": modes["confusion_exp_border"],
        },
        "objects": obj.counts(),
        "n_pred": pred_inst.n_instances,
        "n_gt": gt_inst.n_instances,
        "matches": [[p, g, round(v, 6)] for p, g, v in obj.matches],
        "config": {
            "tau_correct": cfg.tau_correct,
            "tau_partial": cfg.tau_partial,
            "matching": "greedy descending IoU, one-to-one",
            "partial_gt_counts_as_fn": False,
            "empty_iou": 1.0,
        },
    }
