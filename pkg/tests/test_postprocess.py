import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrdnet.errors import ConfigError, InvalidInputError
from hrdnet.postprocess import (
    DetectionSet, ensemble_merge, iou, iou_matrix, load_detections, multi_scale_merge, nms,
    nms_indices, save_detections, score_order, to_records,
)

from oracles import box_iou, brute_force_nms


def random_dets(rng, n, classes=3, coarse_scores=True):
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(1, 30, (n, 2))
    # coarse scores produce ties, which exercise the tie-break
    scores = rng.integers(0, 10, n) / 10 if coarse_scores else rng.uniform(0, 1, n)
    return DetectionSet(np.c_[xy, wh], scores, rng.integers(0, classes, n))


def test_iou_basics():
    assert iou([0, 0, 2, 2], [1, 1, 2, 2]) == pytest.approx(1 / 7)
    assert iou([0, 0, 1, 1], [1, 0, 1, 1]) == 0.0
    m = iou_matrix([[0, 0, 2, 2]], [[1, 1, 2, 2], [0, 0, 2, 2], [5, 5, 0, 0]])
    np.testing.assert_allclose(m, [[1 / 7, 1.0, 0.0]])


def test_score_order_breaks_ties_by_index():
    assert score_order(np.array([0.5, 0.9, 0.5, 0.9])).tolist() == [1, 3, 0, 2]


def test_nms_suppresses_only_same_class_above_threshold():
    dets = DetectionSet([[0, 0, 10, 10], [1, 0, 10, 10], [1, 0, 10, 10], [0, 5, 10, 10]],
                        [0.9, 0.8, 0.7, 0.6], [0, 0, 1, 0])
    assert nms_indices(dets, 0.5).tolist() == [0, 2, 3]  # IoU(0, 3) = 1/3 stays
    assert nms_indices(dets, 0.3).tolist() == [0, 2]


def test_nms_threshold_is_strict():
    dets = DetectionSet([[0, 0, 2, 1], [1, 0, 2, 1]], [0.9, 0.8], [0, 0])
    assert iou(*dets.boxes) == pytest.approx(1 / 3)
    assert len(nms(dets, 1 / 3 + 1e-12)) == 2
    assert len(nms(dets, 0.3)) == 1


def test_nms_empty():
    assert len(nms(DetectionSet())) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 30), st.floats(0.1, 0.9))
def test_nms_matches_brute_force(seed, n, threshold):
    dets = random_dets(np.random.default_rng(seed), n)
    want = brute_force_nms(dets.boxes.tolist(), dets.scores.tolist(), dets.labels.tolist(), threshold)
    assert nms_indices(dets, threshold).tolist() == want


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_merges_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    sets = [random_dets(rng, int(rng.integers(0, 10))) for _ in range(3)]
    scales = [0.75, 1.0, 1.25]
    pooled = DetectionSet.concatenate([DetectionSet(s.boxes / f, s.scores, s.labels)
                                       for s, f in zip(sets, scales)])
    keep = brute_force_nms(pooled.boxes.tolist(), pooled.scores.tolist(), pooled.labels.tolist(), 0.5)
    merged = multi_scale_merge(sets, scales)
    np.testing.assert_array_equal(merged.boxes, pooled.boxes[keep])
    raw = DetectionSet.concatenate(sets)
    keep = brute_force_nms(raw.boxes.tolist(), raw.scores.tolist(), raw.labels.tolist(), 0.5)
    np.testing.assert_array_equal(ensemble_merge(sets).boxes, raw.boxes[keep])


def test_oracle_iou_agrees_with_package(rng):
    a, b = rng.uniform(0, 20, (2, 50, 4)) + [0, 0, 1, 1]
    for x, y in zip(a, b):
        assert iou(x, y) == pytest.approx(box_iou(x, y), abs=1e-12)


def test_multi_scale_merge_validates():
    with pytest.raises(ConfigError):
        multi_scale_merge([DetectionSet()], [1.0, 2.0])
    with pytest.raises(ConfigError):
        multi_scale_merge([DetectionSet()], [0.0])


def test_multi_scale_merge_maps_to_source_frame():
    a = DetectionSet([[15, 15, 30, 30]], [0.9], [0])  # at scale 1.5
    b = DetectionSet([[10, 10, 20, 20]], [0.8], [0])  # at scale 1.0
    merged = multi_scale_merge([a, b], [1.5, 1.0])
    np.testing.assert_allclose(merged.boxes, [[10, 10, 20, 20]])
    assert merged.scores.tolist() == [0.9]


def test_detection_set_validates_lengths():
    with pytest.raises(InvalidInputError):
        DetectionSet([[0, 0, 1, 1]], [0.5, 0.6], [0])


def test_dump_round_trip(tmp_path):
    dets = DetectionSet([[1.5, 2, 3, 4], [0, 0, 1, 1]], [0.9, 0.25], [0, 2])
    records = to_records(7, dets, "a.png", category_ids=[10, 20, 30])
    assert records[1] == {"image_id": 7, "category_id": 30, "score": 0.25,
                          "bbox": [0.0, 0.0, 1.0, 1.0], "file_name": "a.png"}
    save_detections(tmp_path / "d.json", records)
    back = load_detections(tmp_path / "d.json")[7]
    np.testing.assert_array_equal(back.boxes, dets.boxes)
    assert back.labels.tolist() == [10, 30]


def test_load_detections_reports_bad_record(tmp_path):
    (tmp_path / "d.json").write_text(json.dumps([{"image_id": 1, "bbox": [0, 0, 1]}]))
    with pytest.raises(InvalidInputError, match="record 0"):
        load_detections(tmp_path / "d.json")
