"""COCO-style box evaluation: AP over IoU 0.50:0.95, size buckets, AR@k.

Matching and accumulation follow the COCO reference semantics:
detections are matched greedily in score order to the highest-IoU unmatched
ground truth of the same class, the precision envelope is sampled at 101
recall points, and ``max_detections`` truncates per image and class.
Size buckets are half-open: small ``< 32**2``, medium ``[32**2, 96**2)``,
large ``>= 96**2``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .postprocess import DetectionSet, iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = (1, 10, 100, 500)
AP_MAX_DETECTIONS = 100
AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, np.inf),
}


@dataclass
class EvalReport:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar1: float | None
    ar10: float | None
    ar100: float | None
    ar500: float | None

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def in_bucket(area, area_range) -> np.ndarray:
    lo, hi = area_range
    area = np.asarray(area)
    return (area >= lo) & (area < hi)


def _match(ious: np.ndarray, gt_ignore: np.ndarray, thresholds) -> np.ndarray:
    """Greedy matching for detections already in score order.

    ``ious`` is ``(D, G)`` with non-ignored ground truths first. Returns the
    matched ground-truth column per threshold and detection, ``-1`` if none.
    Each detection takes the highest-IoU free ground truth (last one on ties);
    ignored ground truths are only used when no regular one qualifies.
    """
    n_det, n_gt = ious.shape
    thresholds = np.minimum(np.asarray(thresholds, dtype=np.float64), 1 - 1e-10)
    matches = np.full((len(thresholds), n_det), -1, dtype=np.int64)
    if n_gt == 0:
        return matches
    taken = np.zeros((len(thresholds), n_gt), dtype=bool)
    rows = np.arange(len(thresholds))
    for d in range(n_det):
        ok = ~taken & (ious[d][None, :] >= thresholds[:, None])
        regular = ok & ~gt_ignore[None, :]
        pool = np.where(regular.any(axis=1, keepdims=True), regular, ok & gt_ignore[None, :])
        found = pool.any(axis=1)
        if not found.any():
            continue
        vals = np.where(pool, ious[d][None, :], -1.0)
        best = vals.max(axis=1, keepdims=True)
        last = n_gt - 1 - np.argmax((vals == best)[:, ::-1], axis=1)
        m = np.where(found, last, -1)
        matches[:, d] = m
        taken[rows[found], m[found]] = True
    return matches


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold: float,
                     gt_ignore=None) -> np.ndarray:
    """True-positive flag per detection (input order) at one IoU threshold.

    All boxes are assumed to share one class. Detections matched to an
    ignored ground truth are reported as not-TP.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_ignore = (np.zeros(len(gt_boxes), dtype=bool) if gt_ignore is None
                 else np.asarray(gt_ignore, dtype=bool))
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="mergesort")
    gt_order = np.argsort(gt_ignore, kind="mergesort")
    ious = iou_matrix(det_boxes[order], gt_boxes[gt_order])
    m = _match(ious, gt_ignore[gt_order], [iou_threshold])[0]
    flags = np.zeros(len(det_boxes), dtype=bool)
    flags[order] = (m > -1) & ~gt_ignore[gt_order][np.maximum(m, 0)]
    return flags


def interpolated_precision(tp_flags, fp_flags, num_gt: int) -> np.ndarray:
    """Precision envelope at the 101 recall points for score-sorted flags."""
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(np.asarray(fp_flags, dtype=np.float64))
    q = np.zeros(len(RECALL_POINTS))
    if len(tp) == 0:
        return q
    recall = tp / num_gt
    precision = tp / (fp + tp + np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return q


def average_precision(tp_flags, num_gt: int, ignore_flags=None) -> float | None:
    """101-point AP for score-sorted TP flags; ``None`` when there is nothing to score."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    ignore = (np.zeros_like(tp_flags) if ignore_flags is None
              else np.asarray(ignore_flags, dtype=bool))
    if num_gt == 0:
        return None
    q = interpolated_precision(tp_flags & ~ignore, ~tp_flags & ~ignore, num_gt)
    return float(q.mean())


class _Evaluator:
    """Per-(image, class) matching done once, then sliced by area range and k."""

    def __init__(self, gts: Mapping[int, tuple], dets: Mapping[int, DetectionSet],
                 max_dets=MAX_DETECTIONS, thresholds=IOU_THRESHOLDS):
        self.thresholds = np.asarray(thresholds)
        self.max_dets = tuple(max_dets)
        self.image_ids = sorted(set(gts) | set(dets))
        self.gts = {}
        for image_id in self.image_ids:
            boxes, labels = gts.get(image_id, (np.zeros((0, 4)), np.zeros(0, dtype=np.int64)))
            self.gts[image_id] = (np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                                  np.asarray(labels, dtype=np.int64).reshape(-1))
        self.dets = {i: dets.get(i, DetectionSet()) for i in self.image_ids}
        gt_cats = {int(c) for _, labels in self.gts.values() for c in labels}
        det_cats = {int(c) for d in self.dets.values() for c in d.labels}
        self.categories = sorted(gt_cats | det_cats)

    def _evaluate_image(self, image_id, cat, area_range):
        gt_boxes, gt_labels = self.gts[image_id]
        g = gt_boxes[gt_labels == cat]
        det = self.dets[image_id]
        sel = det.labels == cat
        d_boxes, d_scores = det.boxes[sel], det.scores[sel]
        if len(g) == 0 and len(d_boxes) == 0:
            return None
        g_ignore = ~in_bucket(g[:, 2] * g[:, 3], area_range)
        g_order = np.argsort(g_ignore, kind="mergesort")
        g, g_ignore = g[g_order], g_ignore[g_order]
        d_order = np.argsort(-d_scores, kind="mergesort")[: self.max_dets[-1]]
        d_boxes, d_scores = d_boxes[d_order], d_scores[d_order]

        matches = _match(iou_matrix(d_boxes, g), g_ignore, self.thresholds)
        matched = matches > -1
        if len(g):
            d_ignore = np.where(matched, g_ignore[np.maximum(matches, 0)], False)
        else:
            d_ignore = np.zeros_like(matched)
        outside = ~in_bucket(d_boxes[:, 2] * d_boxes[:, 3], area_range)
        d_ignore |= ~matched & outside[None, :]
        return d_scores, matched, d_ignore, g_ignore

    def accumulate(self):
        T, R, K = len(self.thresholds), len(RECALL_POINTS), len(self.categories)
        A, M = len(AREA_RANGES), len(self.max_dets)
        precision = -np.ones((T, R, K, A, M))
        recall = -np.ones((T, K, A, M))
        for k, cat in enumerate(self.categories):
            for a, area_range in enumerate(AREA_RANGES.values()):
                evals = [self._evaluate_image(i, cat, area_range) for i in self.image_ids]
                evals = [e for e in evals if e is not None]
                if not evals:
                    continue
                g_ignore = np.concatenate([e[3] for e in evals])
                n_gt = int(np.count_nonzero(~g_ignore))
                if n_gt == 0:
                    continue
                for m, max_det in enumerate(self.max_dets):
                    scores = np.concatenate([e[0][:max_det] for e in evals])
                    order = np.argsort(-scores, kind="mergesort")
                    matched = np.concatenate([e[1][:, :max_det] for e in evals], axis=1)[:, order]
                    ignored = np.concatenate([e[2][:, :max_det] for e in evals], axis=1)[:, order]
                    tps = matched & ~ignored
                    fps = ~matched & ~ignored
                    for t in range(T):
                        tp_sum = np.cumsum(tps[t])
                        recall[t, k, a, m] = tp_sum[-1] / n_gt if len(tp_sum) else 0.0
                        precision[t, :, k, a, m] = interpolated_precision(tps[t], fps[t], n_gt)
        return precision, recall


def _mean_valid(values: np.ndarray) -> float | None:
    valid = values[values > -1]
    return float(valid.mean()) if valid.size else None


def evaluate(gts: Mapping[int, tuple], dets: Mapping[int, DetectionSet]) -> EvalReport:
    """Evaluate detections against ground truth.

    ``gts`` maps image id to ``(boxes, labels)``; ``dets`` maps image id to a
    :class:`DetectionSet`. Labels must use the same class ids on both sides.
    """
    ev = _Evaluator(gts, dets)
    precision, recall = ev.accumulate()
    m_ap = ev.max_dets.index(AP_MAX_DETECTIONS)
    areas = list(AREA_RANGES)

    def ap(area="all", t=None):
        p = precision[:, :, :, areas.index(area), m_ap]
        if t is not None:
            p = p[[int(np.argmin(np.abs(ev.thresholds - t)))]]
        return _mean_valid(p)

    def ar(k):
        return _mean_valid(recall[:, :, areas.index("all"), ev.max_dets.index(k)])

    return EvalReport(
        ap=ap(), ap50=ap(t=0.5), ap75=ap(t=0.75),
        ap_small=ap("small"), ap_medium=ap("medium"), ap_large=ap("large"),
        ar1=ar(1), ar10=ar(10), ar100=ar(100), ar500=ar(500),
    )


def size_bucketed_ap(gts: Mapping[int, tuple], dets: Mapping[int, DetectionSet]):
    r = evaluate(gts, dets)
    return r.ap_small, r.ap_medium, r.ap_large


def average_recall(gts: Mapping[int, tuple], dets: Mapping[int, DetectionSet],
                   max_detections: int) -> float | None:
    ev = _Evaluator(gts, dets, max_dets=(max_detections,))
    _, recall = ev.accumulate()
    return _mean_valid(recall[:, :, 0, 0])


def ground_truth_of(dataset) -> dict[int, tuple]:
    return {s.image_id: (s.boxes, s.labels) for s in dataset.samples}


def evaluate_dataset(dataset, dets: Mapping[int, DetectionSet]) -> EvalReport:
    return evaluate(ground_truth_of(dataset), dets)
