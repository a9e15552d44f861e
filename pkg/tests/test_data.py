import json

import numpy as np
import pytest

from hrdnet.data import (
    SceneSpec, generate_dataset, generate_scene, load_annotations, save_annotations,
    to_coco_dict, write_dataset,
)
from hrdnet.errors import AnnotationError, ConfigError


def test_scene_is_deterministic():
    spec = SceneSpec(seed=3)
    a, b = generate_scene(spec, 7), generate_scene(spec, 7)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.boxes, b.boxes)
    assert not np.array_equal(a.image, generate_scene(spec, 8).image)
    assert a.image.dtype == np.uint8 and a.image.shape == (256, 256, 3)


def test_background_only_scene():
    s = generate_scene(SceneSpec(objects_per_image=(0, 0)), 0)
    assert s.boxes.shape == (0, 4) and s.labels.shape == (0,)


def test_fixed_size_objects():
    s = generate_scene(SceneSpec(object_size_px=(8, 8), objects_per_image=(5, 5)), 1)
    assert (s.boxes[:, 2:] == 8).all()


def test_boxes_inside_image_small_and_separated():
    spec = SceneSpec(objects_per_image=(8, 12))
    for i in range(20):
        s = generate_scene(spec, i)
        b = s.boxes
        assert (b[:, :2] >= 0).all() and (b[:, 0] + b[:, 2] <= 256).all() and (b[:, 1] + b[:, 3] <= 256).all()
        assert (b[:, 2] * b[:, 3] < 32 ** 2).all()
        assert ((0 <= s.labels) & (s.labels < 5)).all()
        for p in range(len(b)):
            for q in range(p + 1, len(b)):
                x1, y1 = np.maximum(b[p, :2], b[q, :2])
                x2 = min(b[p, 0] + b[p, 2], b[q, 0] + b[q, 2])
                y2 = min(b[p, 1] + b[p, 3], b[q, 1] + b[q, 3])
                inter = max(0, x2 - x1) * max(0, y2 - y1)
                assert inter / (b[p, 2] * b[p, 3] + b[q, 2] * b[q, 3] - inter) < 0.3


def test_sprites_fill_their_boxes():
    s = generate_scene(SceneSpec(clutter_level=0.0, objects_per_image=(4, 4), object_size_px=(10, 20)), 2)
    bg = np.median(s.image.reshape(-1, 3), axis=0)
    for x, y, w, h in s.boxes.astype(int):
        patch = s.image[y:y + h, x:x + w].astype(int)
        assert (np.abs(patch - bg).sum(-1) > 30).any()


@pytest.mark.parametrize("bad", [
    dict(image_size=(0, 10)), dict(object_size_px=(0, 4)), dict(object_size_px=(4, 200)),
    dict(objects_per_image=(3, 1)), dict(num_classes=0), dict(clutter_level=2.0),
])
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        SceneSpec(**bad).validate()


def test_round_trip(tmp_path):
    ds = generate_dataset(SceneSpec(), 3, "val")
    path = write_dataset(ds, tmp_path)
    back = load_annotations(path)
    assert back.split == "val" and back.class_names == ds.class_names
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        assert a.image_id == b.image_id and a.file_name == b.file_name
    save_annotations(back, tmp_path / "again.json")
    assert json.loads((tmp_path / "again.json").read_text()) == to_coco_dict(ds)


def _doc(**over):
    doc = {"images": [{"id": 1, "file": None, "height": 20, "width": 30}],
           "annotations": [], "categories": [{"id": 4, "name": "a"}]}
    doc.update(over)
    return doc


def test_empty_annotations_load(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(_doc(images=[])))
    assert len(load_annotations(p)) == 0


def test_zero_width_box_rejected_with_record_id(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(_doc(annotations=[
        {"id": 17, "image_id": 1, "category_id": 4, "bbox": [1, 1, 0, 5]}])))
    with pytest.raises(AnnotationError, match="id 17"):
        load_annotations(p)
    assert len(load_annotations(p, invalid_boxes="clip").samples[0].boxes) == 0


def test_out_of_bounds_box_clip_mode(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(_doc(annotations=[
        {"id": 1, "image_id": 1, "category_id": 4, "bbox": [25, -2, 10, 6]}])))
    with pytest.raises(AnnotationError, match="leaves"):
        load_annotations(p)
    np.testing.assert_array_equal(load_annotations(p, invalid_boxes="clip").samples[0].boxes,
                                  [[25, 0, 5, 4]])


def test_unknown_category_and_parse_errors(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(_doc(annotations=[
        {"id": 3, "image_id": 1, "category_id": 9, "bbox": [1, 1, 2, 2]}])))
    with pytest.raises(AnnotationError, match="unknown category_id 9"):
        load_annotations(p)
    p.write_text('{"images": [\n  {"id": 1,}\n]}')
    with pytest.raises(AnnotationError, match="line 2"):
        load_annotations(p)
    p.write_text(json.dumps({"images": []}))
    with pytest.raises(AnnotationError, match="annotations"):
        load_annotations(p)


def test_labels_must_be_below_class_count():
    from hrdnet.data import Dataset
    from hrdnet.geometry import AnnotatedImage
    with pytest.raises(AnnotationError):
        Dataset([AnnotatedImage(np.zeros((4, 4, 3), np.uint8), [[0, 0, 1, 1]], [3])], ["a", "b"])
