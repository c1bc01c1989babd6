"""Precision/recall, average precision by difficulty subset, and FDDB-style ROC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Ellipse, ellipse_to_box, iou_matrix, score_order

TP, FP, IGNORED = 1, 0, -1
SUBSETS = ("easy", "medium", "hard")


class EvaluationError(ValueError):
    pass


def difficulty_for_side(side: float) -> str:
    """Side-based proxy: hard below 40 px, easy above 100 px, medium in between."""
    if side < 40:
        return "hard"
    if side > 100:
        return "easy"
    return "medium"


def box_side(boxes: np.ndarray) -> np.ndarray:
    return np.maximum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])


@dataclass
class EvalRecord:
    image_id: str
    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_boxes: np.ndarray
    gt_tags: list[str] = field(default_factory=list)
    gt_ignore: np.ndarray | None = None

    def __post_init__(self):
        self.det_boxes = np.asarray(self.det_boxes, dtype=np.float64).reshape(-1, 4)
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.det_boxes) != len(self.det_scores):
            raise EvaluationError(f"{self.image_id}: {len(self.det_boxes)} boxes vs {len(self.det_scores)} scores")
        if not np.all(np.isfinite(self.det_scores)):
            raise EvaluationError(f"{self.image_id}: non-finite detection score")
        if not self.gt_tags:
            self.gt_tags = [difficulty_for_side(s) for s in box_side(self.gt_boxes)]
        if self.gt_ignore is None:
            self.gt_ignore = np.zeros(len(self.gt_boxes), dtype=bool)
        self.gt_ignore = np.asarray(self.gt_ignore, dtype=bool)
        order = score_order(self.det_scores)
        self.det_boxes, self.det_scores = self.det_boxes[order], self.det_scores[order]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    ap: float
    num_gt: int
    num_det: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def match_detections(det_boxes: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray | None = None,
                     iou_thresh: float = 0.5, return_iou: bool = False):
    """Greedy matching of score-sorted detections.

    Each detection takes the highest-IoU candidate with IoU >= ``iou_thresh``
    (lowest gt index among ties). Candidates are the still-unmatched regular
    gts plus every ignore gt; landing on a regular gt is a TP and consumes it,
    landing on an ignore gt marks the detection ``IGNORED``, no candidate is
    an FP.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ignore = np.zeros(len(gt_boxes), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    flags = np.full(len(det_boxes), FP, dtype=np.int64)
    matched_iou = np.zeros(len(det_boxes))
    gt_of = np.full(len(det_boxes), -1, dtype=np.int64)
    if len(gt_boxes) and len(det_boxes):
        ious = iou_matrix(det_boxes, gt_boxes)
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for i in range(len(det_boxes)):
            cand = np.where(taken & ~ignore, -1.0, ious[i])
            j = int(cand.argmax())
            if cand[j] >= iou_thresh:
                gt_of[i] = j
                matched_iou[i] = cand[j]
                if ignore[j]:
                    flags[i] = IGNORED
                else:
                    flags[i] = TP
                    taken[j] = True
    if return_iou:
        return flags, matched_iou, gt_of
    return flags


def precision_envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(records: Sequence[EvalRecord], subset: str | Iterable[str] | None = None,
                      iou_thresh: float = 0.5) -> PRCurve:
    """PR curve and AP over all records; gts outside ``subset`` act as ignore regions."""
    keep_tags = None if subset is None else ({subset} if isinstance(subset, str) else set(subset))
    all_scores, all_flags, img_idx = [], [], []
    num_gt = 0
    for r_i, r in enumerate(records):
        in_subset = np.array([keep_tags is None or t in keep_tags for t in r.gt_tags], dtype=bool)
        ignore = r.gt_ignore | ~in_subset
        num_gt += int((~ignore).sum())
        flags = match_detections(r.det_boxes, r.gt_boxes, ignore, iou_thresh)
        all_scores.append(r.det_scores)
        all_flags.append(flags)
        img_idx.append(np.full(len(flags), r_i))
    if num_gt == 0:
        raise EvaluationError(f"no ground truth in subset {subset!r}; AP is undefined")
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    flags = np.concatenate(all_flags) if all_flags else np.zeros(0, np.int64)
    img = np.concatenate(img_idx) if img_idx else np.zeros(0, np.int64)
    # global order: score desc, then record order, then within-record rank (already sorted)
    order = np.lexsort((np.arange(len(scores)), img, -scores))
    scores, flags = scores[order], flags[order]
    counted = flags != IGNORED
    scores, flags = scores[counted], flags[counted]
    tp = np.cumsum(flags == TP)
    fp = np.cumsum(flags == FP)
    if len(flags) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0.0, num_gt, 0)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    return PRCurve(recall, precision, scores, precision_envelope_ap(recall, precision), num_gt, len(flags))


# ---------------------------------------------------------------------------
# FDDB-style ROC

@dataclass
class EllipseRecord:
    image_id: str
    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_ellipses: list[Ellipse]


def fddb_roc(records: Sequence[EllipseRecord], mode: str = "discrete", iou_thresh: float = 0.5
             ) -> list[tuple[int, float]]:
    """ROC points ``(cumulative false positives, credited true-positive rate)``, one per score level.

    Ellipse gts are compared through their tight bounding boxes. Discrete mode
    credits each match 1, continuous mode credits its IoU. Matching is the
    greedy rule of ``match_detections``; because it runs in score order, the
    matches at any threshold are a prefix of the full run.
    """
    if mode not in ("discrete", "continuous"):
        raise ValueError(f"mode must be 'discrete' or 'continuous', got {mode!r}")
    total_gt = sum(len(r.gt_ellipses) for r in records)
    scores, credit, is_fp = [], [], []
    for r in records:
        boxes = np.asarray(r.det_boxes, dtype=np.float64).reshape(-1, 4)
        sc = np.asarray(r.det_scores, dtype=np.float64).reshape(-1)
        order = score_order(sc)
        boxes, sc = boxes[order], sc[order]
        gts = np.array([ellipse_to_box(e).as_array() for e in r.gt_ellipses]).reshape(-1, 4)
        flags, ious, _ = match_detections(boxes, gts, None, iou_thresh, return_iou=True)
        scores.append(sc)
        credit.append(np.where(flags == TP, 1.0 if mode == "discrete" else ious, 0.0))
        is_fp.append(flags == FP)
    if not scores or sum(len(s) for s in scores) == 0:
        return [(0, 0.0)]
    s = np.concatenate(scores)
    c = np.concatenate(credit)
    f = np.concatenate(is_fp)
    order = np.argsort(-s, kind="stable")
    s, c, f = s[order], c[order], f[order]
    cum_c = np.cumsum(c)
    cum_f = np.cumsum(f)
    last_of_level = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    denom = max(total_gt, 1)
    return [(int(cum_f[i]), float(cum_c[i] / denom)) for i in last_of_level]


# ---------------------------------------------------------------------------
# output

def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision", "score"])
        for r, p, s in zip(curve.recall, curve.precision, curve.scores):
            w.writerow([f"{r:.6f}", f"{p:.6f}", f"{s:.6f}"])


def write_roc_csv(path, points: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["false_positives", "true_positive_rate"])
        for fp, tpr in points:
            w.writerow([fp, f"{tpr:.6f}"])


def summary_line(subset: str, curve: PRCurve) -> str:
    return f"subset={subset} ap={curve.ap:.6f} num_gt={curve.num_gt} num_det={curve.num_det}"
