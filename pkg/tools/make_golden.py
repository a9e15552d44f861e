"""Regenerate the evaluator golden files with the reference COCO evaluator.

Writes ``tests/golden/{gt.json, dets.json, coco_eval.json}``. Needs the
``golden`` extra (pycocotools); the test suite only reads the committed files.

    python3 tools/make_golden.py
"""
from __future__ import annotations

import contextlib
import io
import json
from pathlib import Path

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

OUT = Path(__file__).resolve().parents[1] / "tests" / "golden"
N_IMAGES = 20
CATEGORIES = [1, 3, 7]
MAX_DETS = [1, 10, 100, 500]
# exact bucket edges are avoided: the reference evaluator treats them as closed
EDGES = (32 ** 2, 96 ** 2)


def _box(rng, side_lo, side_hi, h, w):
    while True:
        bw, bh = rng.uniform(side_lo, side_hi, size=2).round(2)
        if all(abs(bw * bh - e) > 1e-3 for e in EDGES):
            break
    x = round(float(rng.uniform(0, w - bw)), 2)
    y = round(float(rng.uniform(0, h - bh)), 2)
    return [x, y, float(bw), float(bh)]


def build_fixture(seed: int = 2024):
    rng = np.random.default_rng(seed)
    images, annotations, results = [], [], []
    ann_id = 1
    for image_id in range(1, N_IMAGES + 1):
        h, w = 480, 640
        images.append({"id": image_id, "file": f"img_{image_id:03d}.png", "height": h, "width": w})
        gts = []
        crowded = image_id == 13  # > 100 detections of one class: AR@100 vs AR@500
        n_gt = 0 if image_id == 5 else 120 if crowded else int(rng.integers(1, 9))
        for _ in range(n_gt):
            size = "s" if crowded else rng.choice(["s", "m", "l"], p=[0.5, 0.3, 0.2])
            lo, hi = {"s": (4, 31), "m": (33, 95), "l": (97, 200)}[size]
            box = _box(rng, lo, hi, h, w)
            cat = CATEGORIES[0] if crowded else int(rng.choice(CATEGORIES))
            gts.append((box, cat))
            annotations.append({"id": ann_id, "image_id": image_id, "category_id": cat,
                                "bbox": box, "area": box[2] * box[3], "iscrowd": 0})
            ann_id += 1
        if image_id == 9:
            continue  # ground truth without any detections
        for box, cat in gts:
            if rng.random() < 0.15:
                continue  # missed object
            x, y, bw, bh = box
            jit = rng.normal(0, 0.08, size=4) * [bw, bh, bw, bh]
            det = [x + jit[0], y + jit[1], max(1.0, bw + jit[2]), max(1.0, bh + jit[3])]
            if rng.random() < 0.1:
                cat = int(rng.choice([c for c in CATEGORIES if c != cat]))
            results.append({"image_id": image_id, "category_id": cat,
                            "bbox": [round(float(v), 2) for v in det],
                            "score": round(float(rng.uniform(0.3, 1.0)), 6)})
            if rng.random() < 0.3:  # duplicate
                dup = [round(float(v + rng.normal(0, 2)), 2) for v in det[:2]] + \
                      [round(float(v), 2) for v in det[2:]]
                results.append({"image_id": image_id, "category_id": cat, "bbox": dup,
                                "score": round(float(rng.uniform(0.05, 0.9)), 6)})
        n_fp = 150 if crowded else int(rng.integers(0, 6))
        for _ in range(n_fp):
            size = rng.choice(["s", "m", "l"], p=[0.6, 0.3, 0.1])
            lo, hi = {"s": (4, 31), "m": (33, 95), "l": (97, 200)}[size]
            cat = CATEGORIES[0] if crowded else int(rng.choice(CATEGORIES))
            results.append({"image_id": image_id, "category_id": cat,
                            "bbox": _box(rng, lo, hi, h, w),
                            "score": round(float(rng.uniform(0.0, 0.8)), 6)})
    results = [r for r in results
               if all(abs(r["bbox"][2] * r["bbox"][3] - e) > 1e-3 for e in EDGES)]
    categories = [{"id": c, "name": f"class_{c}"} for c in CATEGORIES]
    gt = {"images": images, "annotations": annotations, "categories": categories}
    return gt, results


def reference_metrics(gt: dict, results: list[dict]) -> dict:
    coco_gt_doc = dict(gt, images=[dict(im, file_name=im["file"]) for im in gt["images"]])
    with contextlib.redirect_stdout(io.StringIO()):
        coco_gt = COCO()
        coco_gt.dataset = coco_gt_doc
        coco_gt.createIndex()
        coco_dt = coco_gt.loadRes(results)
        ev = COCOeval(coco_gt, coco_dt, "bbox")
        ev.params.maxDets = MAX_DETS
        ev.evaluate()
        ev.accumulate()
    precision, recall = ev.eval["precision"], ev.eval["recall"]
    m100 = MAX_DETS.index(100)
    iou = ev.params.iouThrs

    def ap(a, t=None):
        p = precision[:, :, :, a, m100]
        if t is not None:
            p = p[np.where(np.isclose(iou, t))[0]]
        p = p[p > -1]
        return float(p.mean()) if p.size else None

    def ar(m):
        r = recall[:, :, 0, m]
        r = r[r > -1]
        return float(r.mean()) if r.size else None

    return {"ap": ap(0), "ap50": ap(0, 0.5), "ap75": ap(0, 0.75),
            "ap_small": ap(1), "ap_medium": ap(2), "ap_large": ap(3),
            "ar1": ar(0), "ar10": ar(1), "ar100": ar(2), "ar500": ar(3)}


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    gt, results = build_fixture()
    metrics = reference_metrics(gt, results)
    (OUT / "gt.json").write_text(json.dumps(gt, indent=1) + "\n")
    (OUT / "dets.json").write_text(json.dumps(results, indent=1) + "\n")
    (OUT / "coco_eval.json").write_text(json.dumps(metrics, indent=1) + "\n")
    print(json.dumps(metrics, indent=1))


if __name__ == "__main__":
    main()
