"""HRDNet assembly: image pyramid -> parallel streams -> multi-scale FPN -> head."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import HRDNetConfig
from .errors import ConfigError
from .geometry import build_pyramid, pad_to_alignment, pyramid_divisor, resize
from .head import AnchorSet, RetinaHead, decode, flatten_predictions, generate_anchors
from .msfpn import MSFPN, OutputProjection, project_outputs, wrap_fused
from .postprocess import DetectionSet, multi_scale_merge, nms
from .streams import MDIPN, count_parameters, forward_mdipn

PIXEL_MEAN = 127.5
PIXEL_STD = 64.0


class HRDNet(nn.Module):
    def __init__(self, cfg: HRDNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = MDIPN(cfg.stream_specs, cfg.input_channels, seed=cfg.seed)
        in_channels = [s.out_channels for s in self.backbone.streams]
        self.fpn = MSFPN(in_channels, cfg.fusion, seed=cfg.seed + 1, alpha=cfg.alpha)
        self.projection = OutputProjection(cfg.levels, cfg.fusion, seed=cfg.seed + 2)
        self.head = RetinaHead(cfg.fusion.common_channels, cfg.head.num_classes,
                               cfg.head.anchors_per_cell, cfg.head.tower_convs,
                               seed=cfg.seed + 3)
        self._anchor_cache: dict = {}

    @property
    def divisor(self) -> int:
        if self.cfg.alpha == 0.5:
            return pyramid_divisor(self.cfg.n_streams, self.backbone.max_stride)
        return self.backbone.max_stride

    def output_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """``(h, w, stride)`` of every output level for an aligned input size."""
        top = self.backbone.max_stride
        strides = [top // 2 ** j for j in range(self.cfg.levels)]
        strides += [top * 2 ** (k + 1) for k in range(self.cfg.fusion.extra_levels)]
        shapes = []
        for j, s in enumerate(strides):
            if j < self.cfg.levels:
                shapes.append((height // s, width // s, s))
            else:
                h, w = shapes[-1][:2] if j > self.cfg.levels else shapes[0][:2]
                shapes.append(((h + 1) // 2, (w + 1) // 2, s))
        return shapes

    def anchors(self, height: int, width: int, dtype=torch.float32) -> AnchorSet:
        key = (height, width, dtype)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                self.output_shapes(height, width), self.cfg.head.anchor_scales,
                self.cfg.head.anchor_ratios, dtype=dtype)
        return self._anchor_cache[key]

    def raw_features(self, images: torch.Tensor) -> list[list[torch.Tensor]]:
        pyramid = build_pyramid(images, self.cfg.n_streams, self.cfg.alpha)
        return self.backbone(pyramid.images)

    def pyramid_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        fused = self.fpn(self.raw_features(images))
        return self.projection(fused[0])

    def forward(self, images: torch.Tensor):
        """Flattened ``(logits, deltas)`` of shape ``(B, A, K)`` and ``(B, A, 4)``."""
        per_level = self.head(self.pyramid_outputs(images))
        return flatten_predictions(per_level, self.cfg.head.num_classes)

    def parameter_count(self) -> int:
        return count_parameters(self.backbone, self.fpn, self.projection, self.head)


def build_model(cfg: HRDNetConfig) -> HRDNet:
    return HRDNet(cfg)


def to_input(image: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` uint8 raster to a normalised ``(C, H, W)`` float tensor."""
    t = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)
    return (t - PIXEL_MEAN) / PIXEL_STD


def input_size(resolution, scale: float = 1.0) -> tuple[int, int]:
    return (max(1, round(resolution[0] * scale)), max(1, round(resolution[1] * scale)))


def _run_single(model: HRDNet, image: np.ndarray, size: tuple[int, int]) -> DetectionSet:
    """Pre-NMS candidates with boxes in the frame of the resized ``size`` input."""
    x = resize(to_input(image), size)
    x, _ = pad_to_alignment(x, 1, 0.5, model.divisor)
    logits, deltas = model(x.unsqueeze(0))
    anchors = model.anchors(*x.shape[-2:])
    head = model.cfg.head
    return decode(logits[0], deltas[0], anchors, size, head.score_threshold, head.pre_nms_top_k)


def _finalise(dets: DetectionSet, iou_threshold: float, max_detections: int) -> DetectionSet:
    dets = nms(dets, iou_threshold)
    return dets.subset(np.arange(min(len(dets), max_detections)))


def _to_source(dets: DetectionSet, size, source) -> DetectionSet:
    sy, sx = source[0] / size[0], source[1] / size[1]
    boxes = dets.boxes * np.array([sx, sy, sx, sy])
    return DetectionSet(boxes, dets.scores, dets.labels)


@torch.no_grad()
def predict(model: HRDNet, image: np.ndarray, scales=None, raw: bool = False) -> DetectionSet:
    """Detect objects in one ``(H, W, C)`` image; boxes come back in source pixels.

    ``scales`` lists test-time factors relative to the configured resolution;
    several factors are merged with a joint NMS. ``raw=True`` skips NMS and
    returns the candidates (single scale only), for pre-NMS ensembling.
    """
    model.eval()
    cfg = model.cfg
    scales = [1.0] if scales is None else list(scales)
    source = image.shape[:2]
    if raw:
        if len(scales) != 1:
            raise ConfigError("scales: raw candidates are only available for a single test scale")
        size = input_size(cfg.resolution, scales[0])
        return _to_source(_run_single(model, image, size), size, source)
    if len(scales) == 1:
        size = input_size(cfg.resolution, scales[0])
        dets = _to_source(_run_single(model, image, size), size, source)
        return _finalise(dets, cfg.head.nms_iou, cfg.head.max_detections)

    per_scale = []
    for s in scales:
        size = input_size(cfg.resolution, s)
        base = input_size(cfg.resolution)
        # express every set in the frame of the configured resolution times s
        d = _run_single(model, image, size)
        d = DetectionSet(d.boxes * np.array([base[1] * s / size[1], base[0] * s / size[0]] * 2),
                         d.scores, d.labels)
        per_scale.append(d)
    merged = multi_scale_merge(per_scale, scales, cfg.head.nms_iou)
    merged = merged.subset(np.arange(min(len(merged), cfg.head.max_detections)))
    return _to_source(merged, input_size(cfg.resolution), source)


def predict_dataset(model: HRDNet, dataset, scales=None, raw: bool = False) -> dict[int, DetectionSet]:
    return {s.image_id: predict(model, s.image, scales, raw) for s in dataset.samples}


def forward_groups(model: HRDNet, image: torch.Tensor):
    """Raw per-stream feature groups for a ``(C, H, W)`` or batched image."""
    pyramid = build_pyramid(image, model.cfg.n_streams, model.cfg.alpha)
    return forward_mdipn(pyramid, model.backbone)


def forward_output_pyramid(model: HRDNet, image: torch.Tensor):
    groups = forward_groups(model, image)
    fused = model.fpn([g.tensors() for g in groups])
    fused_groups = wrap_fused(fused, [m.stride for m in groups[0].maps])
    return project_outputs(fused_groups[0], model.projection)
