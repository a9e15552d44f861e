"""Synthetic small-object scenes and COCO-style annotation files."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigError
from .geometry import AnnotatedImage
from .postprocess import iou_matrix

log = logging.getLogger(__name__)

MAX_OVERLAP_IOU = 0.3
PLACEMENT_RETRIES = 100

# RGB per class; shapes cycle through SHAPES
PALETTE = [
    (230, 40, 40), (40, 200, 60), (50, 90, 240), (240, 220, 30), (220, 50, 220),
    (30, 220, 220), (250, 140, 20), (140, 70, 20), (250, 250, 250), (20, 20, 20),
]
SHAPES = ("square", "disk", "triangle", "cross", "ring")


@dataclass
class SceneSpec:
    image_size: tuple[int, int] = (256, 256)
    objects_per_image: tuple[int, int] = (3, 10)
    object_size_px: tuple[int, int] = (4, 24)
    num_classes: int = 5
    clutter_level: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        lo, hi = self.object_size_px
        if h <= 0 or w <= 0:
            raise ConfigError("scene.image_size: must be positive")
        if lo <= 0 or hi < lo:
            raise ConfigError("scene.object_size_px: need 0 < min <= max")
        if self.objects_per_image[0] < 0 or self.objects_per_image[1] < self.objects_per_image[0]:
            raise ConfigError("scene.objects_per_image: need 0 <= min <= max")
        if hi >= min(h, w) / 2:
            raise ConfigError("scene.object_size_px: max size must be below half the image side")
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ConfigError(f"scene.num_classes: must lie in [1, {len(PALETTE)}]")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ConfigError("scene.clutter_level: must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        for key in ("image_size", "objects_per_image", "object_size_px"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


def class_names(num_classes: int) -> list[str]:
    return [f"{SHAPES[k % len(SHAPES)]}_{k}" for k in range(num_classes)]


def _background(rng: np.random.Generator, h: int, w: int, clutter: float) -> np.ndarray:
    # low-frequency colour field plus pixel noise
    coarse = rng.uniform(60, 160, size=(4, 4, 3))
    field_ = np.asarray(Image.fromarray(coarse.astype(np.uint8)).resize((w, h), Image.BILINEAR),
                        dtype=np.float64)
    field_ += rng.normal(0, 4 + 20 * clutter, size=(h, w, 3))
    # grey distractor bars
    for _ in range(int(round(clutter * 20))):
        bh, bw = rng.integers(1, 4), rng.integers(4, 30)
        if rng.random() < 0.5:
            bh, bw = bw, bh
        y, x = rng.integers(0, max(1, h - bh)), rng.integers(0, max(1, w - bw))
        field_[y:y + bh, x:x + bw] = rng.uniform(70, 170)
    return field_


def _sprite_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "disk":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25 + 1e-9
    if shape == "triangle":
        return np.abs(u - 0.5) <= v / 2 + 1.0 / (2 * w)
    if shape == "cross":
        return (np.abs(u - 0.5) <= 0.2 + 0.5 / w) | (np.abs(v - 0.5) <= 0.2 + 0.5 / h)
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    return (r2 <= 0.25 + 1e-9) & (r2 >= 0.06)


def _draw(img: np.ndarray, box, label: int, rng: np.random.Generator) -> None:
    x, y, w, h = (int(v) for v in box)
    mask = _sprite_mask(SHAPES[label % len(SHAPES)], h, w)
    colour = np.asarray(PALETTE[label], dtype=np.float64) * rng.uniform(0.85, 1.0)
    patch = img[y:y + h, x:x + w]
    patch[mask] = colour
    if label // len(SHAPES) % 2:
        # second palette cycle: striped texture
        stripes = (np.add.outer(np.arange(h), np.arange(w)) % 4 < 2) & mask
        patch[stripes] *= 0.5


def generate_scene(spec: SceneSpec, index: int) -> AnnotatedImage:
    """Render scene ``index``; output depends only on ``(spec.seed, index)``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    img = _background(rng, h, w, spec.clutter_level)

    n_target = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    lo, hi = spec.object_size_px
    boxes, labels = [], []
    for _ in range(n_target):
        label = int(rng.integers(0, spec.num_classes))
        for _attempt in range(PLACEMENT_RETRIES):
            bw, bh = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
            box = [int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh]
            if not boxes or iou_matrix([box], boxes).max() < MAX_OVERLAP_IOU:
                boxes.append(box)
                labels.append(label)
                _draw(img, box, label, rng)
                break
    if len(boxes) < n_target:
        log.info("scene %d: placed %d of %d objects", index, len(boxes), n_target)

    return AnnotatedImage(
        image=np.clip(img, 0, 255).astype(np.uint8),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        image_id=index + 1,
    )


@dataclass
class Dataset:
    samples: list[AnnotatedImage]
    class_names: list[str]
    split: str = "train"
    category_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.category_ids:
            self.category_ids = list(range(1, len(self.class_names) + 1))
        if len(self.category_ids) != len(self.class_names):
            raise AnnotationError("category_ids and class_names differ in length")
        for s in self.samples:
            if len(s.labels) and (s.labels.min() < 0 or s.labels.max() >= self.num_classes):
                raise AnnotationError(f"image {s.image_id}: label outside [0, {self.num_classes})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def generate_dataset(spec: SceneSpec, count: int, split: str = "train",
                     index_offset: int = 0) -> Dataset:
    samples = []
    for k in range(count):
        s = generate_scene(spec, index_offset + k)
        s.file_name = f"{split}_{index_offset + k:06d}.png"
        samples.append(s)
    return Dataset(samples, class_names(spec.num_classes), split)


def to_coco_dict(dataset: Dataset) -> dict:
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        images.append({"id": int(s.image_id), "file": s.file_name,
                       "height": int(s.height), "width": int(s.width)})
        for box, label in zip(s.boxes, s.labels):
            bbox = [float(v) for v in box]
            annotations.append({
                "id": ann_id,
                "image_id": int(s.image_id),
                "category_id": int(dataset.category_ids[label]),
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": 0,
            })
            ann_id += 1
    categories = [{"id": int(c), "name": n}
                  for c, n in zip(dataset.category_ids, dataset.class_names)]
    return {"images": images, "annotations": annotations, "categories": categories,
            "split": dataset.split}


def save_annotations(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(to_coco_dict(dataset), indent=1))


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNG images plus ``<split>.json`` into ``out_dir``; returns the annotation path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        if s.file_name is None:
            s.file_name = f"{dataset.split}_{s.image_id:06d}.png"
        Image.fromarray(s.image).save(out_dir / "images" / s.file_name)
    ann_path = out_dir / f"{dataset.split}.json"
    save_annotations(dataset, ann_path)
    return ann_path


def _bad(path, what: str, index: int, record, msg: str) -> AnnotationError:
    rid = record.get("id", index) if isinstance(record, dict) else index
    return AnnotationError(f"{path}: {what} record {index} (id {rid}): {msg}")


def load_annotations(path, image_root=None, load_images: bool = True,
                     invalid_boxes: str = "error") -> Dataset:
    """Read a COCO-style annotation file.

    ``invalid_boxes`` decides what happens to boxes that are degenerate or
    leave the image: ``"error"`` raises, ``"clip"`` clips to the image and
    drops what collapses. Images are looked up in ``image_root`` (default:
    ``<annotation dir>/images``).
    """
    if invalid_boxes not in ("error", "clip"):
        raise ConfigError(f"invalid_boxes must be 'error' or 'clip', got {invalid_boxes!r}")
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise AnnotationError(f"{path}: missing list field {key!r}")

    cats = doc["categories"]
    try:
        cat_ids = [int(c["id"]) for c in cats]
        names = [str(c["name"]) for c in cats]
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"{path}: malformed category entry: {exc}") from exc
    label_of = {c: k for k, c in enumerate(cat_ids)}

    image_root = Path(image_root) if image_root else path.parent / "images"
    meta, order = {}, []
    for i, rec in enumerate(doc["images"]):
        try:
            image_id = int(rec["id"])
            meta[image_id] = (rec.get("file", rec.get("file_name")), int(rec["height"]), int(rec["width"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise _bad(path, "image", i, rec, f"missing or invalid field {exc}") from exc
        order.append(image_id)

    per_image = {image_id: ([], []) for image_id in order}
    for i, rec in enumerate(doc["annotations"]):
        try:
            image_id = int(rec["image_id"])
            cat = int(rec["category_id"])
            x, y, w, h = (float(v) for v in rec["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise _bad(path, "annotation", i, rec, f"missing or invalid field {exc}") from exc
        if image_id not in meta:
            raise _bad(path, "annotation", i, rec, f"unknown image_id {image_id}")
        if cat not in label_of:
            raise _bad(path, "annotation", i, rec, f"unknown category_id {cat}")
        _, ih, iw = meta[image_id]
        if w <= 0 or h <= 0:
            if invalid_boxes == "error":
                raise _bad(path, "annotation", i, rec, f"non-positive box size {w}x{h}")
            continue
        inside = x >= 0 and y >= 0 and x + w <= iw and y + h <= ih
        if not inside:
            if invalid_boxes == "error":
                raise _bad(path, "annotation", i, rec,
                           f"box {[x, y, w, h]} leaves the {iw}x{ih} image")
            x2, y2 = min(x + w, iw), min(y + h, ih)
            x, y = max(x, 0.0), max(y, 0.0)
            w, h = x2 - x, y2 - y
            if w <= 0 or h <= 0:
                continue
        per_image[image_id][0].append([x, y, w, h])
        per_image[image_id][1].append(label_of[cat])

    samples = []
    for image_id in order:
        file_name, ih, iw = meta[image_id]
        if load_images and file_name:
            image = np.asarray(Image.open(image_root / file_name).convert("RGB"))
        else:
            image = np.zeros((ih, iw, 3), dtype=np.uint8)
        boxes, labels = per_image[image_id]
        samples.append(AnnotatedImage(image, np.asarray(boxes).reshape(-1, 4),
                                      np.asarray(labels, dtype=np.int64),
                                      image_id=image_id, file_name=file_name))
    return Dataset(samples, names, split=doc.get("split", path.stem), category_ids=cat_ids)


def scene_spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
