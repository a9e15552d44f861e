"""Non-maximum suppression, multi-scale test merging and the pre-NMS model ensemble."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError

NMS_IOU = 0.5
SCORE_THRESHOLD = 0.05
TEST_SCALES = (0.75, 1.0, 1.25)


@dataclass
class DetectionSet:
    """Detections for one image; boxes are ``(x, y, w, h)`` in source-image pixels."""
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.labels):
            raise InvalidInputError(
                f"parallel arrays differ in length: {len(self.boxes)} boxes, "
                f"{len(self.scores)} scores, {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.scores)

    def subset(self, index) -> "DetectionSet":
        return DetectionSet(self.boxes[index], self.scores[index], self.labels[index])

    def scaled(self, factor: float) -> "DetectionSet":
        return DetectionSet(self.boxes * factor, self.scores.copy(), self.labels.copy())

    @staticmethod
    def concatenate(sets: list["DetectionSet"]) -> "DetectionSet":
        if not sets:
            return DetectionSet()
        return DetectionSet(
            np.concatenate([s.boxes for s in sets]),
            np.concatenate([s.scores for s in sets]),
            np.concatenate([s.labels for s in sets]),
        )


def iou(box_a, box_b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` / ``(m, 4)`` arrays of xywh boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties broken by input index ascending."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms_indices(dets: DetectionSet, iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Indices kept by per-class greedy NMS, in (score desc, index asc) order."""
    order = score_order(dets.scores)
    keep = []
    for label in np.unique(dets.labels):
        idx = order[dets.labels[order] == label]
        boxes = dets.boxes[idx]
        ious = iou_matrix(boxes, boxes)
        suppressed = np.zeros(len(idx), dtype=bool)
        for k in range(len(idx)):
            if suppressed[k]:
                continue
            keep.append(idx[k])
            suppressed[k + 1:] |= ious[k, k + 1:] > iou_threshold
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    return keep[score_order(dets.scores[keep])]


def nms(dets: DetectionSet, iou_threshold: float = NMS_IOU) -> DetectionSet:
    return dets.subset(nms_indices(dets, iou_threshold))


def multi_scale_merge(det_sets: list[DetectionSet], scale_factors,
                      iou_threshold: float = NMS_IOU) -> DetectionSet:
    """Merge detections made at several test scales.

    ``scale_factors[k]`` is the inference resolution of set ``k`` relative to
    the source image, so its boxes are divided by it before the joint NMS.
    """
    scale_factors = list(scale_factors)
    if len(det_sets) != len(scale_factors):
        raise ConfigError(f"{len(det_sets)} detection sets but {len(scale_factors)} scale factors")
    if any(s <= 0 for s in scale_factors):
        raise ConfigError("scale factors must be positive")
    rescaled = [DetectionSet(d.boxes / s, d.scores, d.labels) for d, s in zip(det_sets, scale_factors)]
    return nms(DetectionSet.concatenate(rescaled), iou_threshold)


def ensemble_merge(raw_det_sets: list[DetectionSet], iou_threshold: float = NMS_IOU) -> DetectionSet:
    """Pool pre-NMS candidates from several models and run one joint NMS."""
    return nms(DetectionSet.concatenate(raw_det_sets), iou_threshold)


def to_records(image_id: int, dets: DetectionSet, file_name: str | None = None,
               category_ids=None) -> list[dict]:
    """Detection dump records, COCO result style.

    ``category_ids[label]`` gives the written class id; without it the
    internal 0-based label is written as is.
    """
    records = []
    for box, score, label in zip(dets.boxes, dets.scores, dets.labels):
        rec = {
            "image_id": int(image_id),
            "category_id": int(label if category_ids is None else category_ids[int(label)]),
            "score": float(score),
            "bbox": [float(v) for v in box],
        }
        if file_name is not None:
            rec["file_name"] = file_name
        records.append(rec)
    return records


def save_detections(path, records: list[dict]) -> None:
    Path(path).write_text(json.dumps(records, indent=1))


def load_detections(path) -> dict[int, DetectionSet]:
    """Read a detection dump, grouped by image id."""
    records = json.loads(Path(path).read_text())
    grouped: dict[int, list[dict]] = {}
    for i, rec in enumerate(records):
        try:
            grouped.setdefault(int(rec["image_id"]), []).append(rec)
            if len(rec["bbox"]) != 4:
                raise ValueError("bbox needs 4 values")
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"{path}: detection record {i} is malformed: {exc}") from exc
    return {
        image_id: DetectionSet(
            [r["bbox"] for r in recs],
            [r["score"] for r in recs],
            [r["category_id"] for r in recs])
        for image_id, recs in grouped.items()
    }
