"""Single-stage anchor head: anchors, target assignment, focal/smooth-L1 loss, decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError
from .layers import conv3x3, group_count, init_weights, seeded_generator
from .postprocess import SCORE_THRESHOLD, DetectionSet

DEFAULT_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
ANCHOR_STRIDE_MULTIPLE = 4

POS_IOU = 0.5
NEG_IOU = 0.4
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
SMOOTH_L1_BETA = 0.11
MAX_LOG_SIZE = math.log(1000.0 / 16)

IGNORE = -2
BACKGROUND = -1


@dataclass
class AnchorSet:
    """Per-level anchors as ``(cx, cy, w, h)``, ordered row, column, anchor-within-cell."""
    levels: list[torch.Tensor]
    strides: list[int]
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...]

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def all(self) -> torch.Tensor:
        return torch.cat(self.levels, dim=0)

    def counts(self) -> list[int]:
        return [len(a) for a in self.levels]


def generate_anchors(pyramid_shapes, scales=DEFAULT_SCALES, ratios=DEFAULT_RATIOS,
                     dtype=torch.float32) -> AnchorSet:
    """Tile anchors over each ``(height, width, stride)`` level.

    Base side is four times the level stride; ``ratio`` is height / width.
    """
    scales, ratios = tuple(scales), tuple(ratios)
    if not scales or not ratios:
        raise ConfigError("anchor scales and aspect ratios must be non-empty")
    shapes = [tuple(s) for s in pyramid_shapes]
    sizes = []
    for s in scales:
        for r in ratios:
            sizes.append((math.sqrt(1.0 / r) * s, math.sqrt(r) * s))
    sizes = torch.tensor(sizes, dtype=torch.float64)
    levels = []
    for height, width, stride in shapes:
        ys = (torch.arange(height, dtype=torch.float64) + 0.5) * stride
        xs = (torch.arange(width, dtype=torch.float64) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        centers = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2).expand(-1, len(sizes), 2)
        wh = (sizes * ANCHOR_STRIDE_MULTIPLE * stride).reshape(1, -1, 2).expand(len(centers), -1, 2)
        levels.append(torch.cat([centers, wh], dim=-1).reshape(-1, 4).to(dtype))
    return AnchorSet(levels=levels, strides=[s[2] for s in shapes],
                     scales=scales, aspect_ratios=ratios)


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    half = b[..., 2:] / 2
    return torch.cat([b[..., :2] - half, b[..., :2] + half], dim=-1)


def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2], b[..., :2] + b[..., 2:]], dim=-1)


def box_iou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None] - inter)


def encode(boxes_xywh: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Regression targets of xywh boxes against cxcywh anchors."""
    w, h = boxes_xywh[..., 2], boxes_xywh[..., 3]
    cx = boxes_xywh[..., 0] + w / 2
    cy = boxes_xywh[..., 1] + h / 2
    return torch.stack([
        (cx - anchors[..., 0]) / anchors[..., 2],
        (cy - anchors[..., 1]) / anchors[..., 3],
        torch.log(w / anchors[..., 2]),
        torch.log(h / anchors[..., 3]),
    ], dim=-1)


def apply_deltas(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`encode`; returns xywh boxes."""
    dw = deltas[..., 2].clamp(max=MAX_LOG_SIZE)
    dh = deltas[..., 3].clamp(max=MAX_LOG_SIZE)
    cx = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    cy = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * torch.exp(dw)
    h = anchors[..., 3] * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, w, h], dim=-1)


@dataclass
class AnchorTargets:
    """``labels``: class id for positives, -1 background, -2 ignored."""
    labels: torch.Tensor
    deltas: torch.Tensor

    @property
    def positive(self) -> torch.Tensor:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(anchors: torch.Tensor, gt_boxes, gt_labels) -> AnchorTargets:
    """IoU assignment of cxcywh anchors to xywh ground truths.

    Positive at IoU >= 0.5, background below 0.4, ignored in between. Each
    ground truth additionally claims its highest-IoU anchor.
    """
    gt_boxes = torch.as_tensor(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
                               dtype=anchors.dtype)
    gt_labels = torch.as_tensor(np.asarray(gt_labels, dtype=np.int64).reshape(-1))
    n = len(anchors)
    labels = torch.full((n,), BACKGROUND, dtype=torch.long)
    deltas = torch.zeros((n, 4), dtype=anchors.dtype)
    if len(gt_boxes) == 0:
        return AnchorTargets(labels, deltas)

    ious = box_iou_xyxy(cxcywh_to_xyxy(anchors), xywh_to_xyxy(gt_boxes))
    best_iou, best_gt = ious.max(dim=1)
    labels[(best_iou >= NEG_IOU) & (best_iou < POS_IOU)] = IGNORE
    pos = best_iou >= POS_IOU

    gt_best_iou, gt_best_anchor = ious.max(dim=0)
    for g in range(len(gt_boxes)):
        if gt_best_iou[g] > 0:
            a = gt_best_anchor[g]
            best_gt[a] = g
            pos[a] = True

    labels[pos] = gt_labels[best_gt[pos]]
    deltas[pos] = encode(gt_boxes[best_gt[pos]], anchors[pos])
    return AnchorTargets(labels, deltas)


class RetinaHead(nn.Module):
    """Classification and box towers shared across all pyramid levels.

    Tower convs are followed by GroupNorm so the head is insensitive to the
    magnitude of the fused features, which grows with the number of summed terms.
    """

    def __init__(self, in_channels: int, num_classes: int, num_anchors: int,
                 tower_convs: int = 2, prior_prob: float = 0.01, seed: int = 0):
        super().__init__()
        if num_classes <= 0 or num_anchors <= 0:
            raise ConfigError("num_classes and num_anchors must be positive")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.num_anchors = num_anchors

        def tower():
            layers = []
            for _ in range(tower_convs):
                layers += [conv3x3(in_channels, in_channels),
                           nn.GroupNorm(group_count(in_channels), in_channels), nn.ReLU()]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.box_tower = tower()
        self.cls_out = conv3x3(in_channels, num_anchors * num_classes, bias=True)
        self.box_out = conv3x3(in_channels, num_anchors * 4, bias=True)

        g = seeded_generator(seed)
        init_weights(self, g)
        for conv in (self.cls_out, self.box_out):
            nn.init.normal_(conv.weight, std=0.01, generator=g)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - prior_prob) / prior_prob))
        nn.init.zeros_(self.box_out.bias)

    def forward(self, features: list[torch.Tensor]):
        outs = []
        for x in features:
            if x.shape[-3] != self.in_channels:
                raise ConfigError(
                    f"head expects {self.in_channels} input channels, got {x.shape[-3]}")
            outs.append((self.cls_out(self.cls_tower(x)), self.box_out(self.box_tower(x))))
        return outs


def head_forward(head: RetinaHead, pyramid) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-level ``(logits, deltas)`` shaped ``(B, A*K, h, w)`` and ``(B, A*4, h, w)``."""
    tensors = pyramid.tensors() if hasattr(pyramid, "tensors") else list(pyramid)
    return head(tensors)


def flatten_predictions(per_level, num_classes: int):
    """Reshape per-level head outputs to ``(B, total_anchors, K)`` and ``(B, total_anchors, 4)``."""
    logits, deltas = [], []
    for cls, box in per_level:
        b, _, h, w = cls.shape
        logits.append(cls.view(b, -1, num_classes, h, w).permute(0, 3, 4, 1, 2)
                      .reshape(b, -1, num_classes))
        deltas.append(box.view(b, -1, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
    return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


@dataclass
class LossBundle:
    classification_loss: torch.Tensor
    regression_loss: torch.Tensor
    total: torch.Tensor
    num_positive: int = 0

    def as_dict(self) -> dict[str, float]:
        return {
            "loss_cls": float(self.classification_loss.detach()),
            "loss_reg": float(self.regression_loss.detach()),
            "loss": float(self.total.detach()),
        }


def focal_loss(logits: torch.Tensor, onehot: torch.Tensor,
               gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> torch.Tensor:
    """Element-wise sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p_t = p * onehot + (1 - p) * (1 - onehot)
    alpha_t = alpha * onehot + (1 - alpha) * (1 - onehot)
    return alpha_t * (1 - p_t) ** gamma * ce


def smooth_l1(diff: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    a = diff.abs()
    return torch.where(a < beta, 0.5 * a ** 2 / beta, a - 0.5 * beta)


def compute_loss(logits: torch.Tensor, deltas: torch.Tensor, targets: list[AnchorTargets],
                 reg_weight: float = 1.0) -> LossBundle:
    """Focal classification + smooth-L1 regression, both normalised by the positive count.

    ``logits`` is ``(B, A, K)`` and ``deltas`` ``(B, A, 4)``; ``targets`` has
    one entry per image.
    """
    if not torch.isfinite(logits).all() or not torch.isfinite(deltas).all():
        raise NumericError("non-finite values in head predictions")
    num_classes = logits.shape[-1]
    labels = torch.stack([t.labels for t in targets])
    target_deltas = torch.stack([t.deltas for t in targets]).to(deltas.dtype)
    valid = labels != IGNORE
    pos = labels >= 0
    num_pos = int(pos.sum())
    norm = max(1, num_pos)

    onehot = torch.zeros_like(logits)
    onehot[pos] = F.one_hot(labels[pos], num_classes).to(logits.dtype)
    cls = focal_loss(logits[valid], onehot[valid]).sum() / norm
    if num_pos:
        reg = smooth_l1(deltas[pos] - target_deltas[pos]).sum() / norm
    else:
        reg = deltas.sum() * 0.0
    total = cls + reg_weight * reg
    return LossBundle(cls, reg, total, num_pos)


def decode(logits: torch.Tensor, deltas: torch.Tensor, anchors: AnchorSet,
           image_size: tuple[int, int], score_threshold: float = SCORE_THRESHOLD,
           pre_nms_top_k: int = 1000) -> DetectionSet:
    """Turn one image's flattened predictions into pre-NMS candidates.

    ``image_size`` is the valid ``(height, width)`` that boxes get clipped to.
    """
    height, width = image_size
    num_classes = logits.shape[-1]
    boxes_out, scores_out, labels_out = [], [], []
    start = 0
    for level_anchors in anchors.levels:
        stop = start + len(level_anchors)
        scores = torch.sigmoid(logits[start:stop].detach()).reshape(-1)
        keep = torch.nonzero(scores > score_threshold).squeeze(1)
        if len(keep) > pre_nms_top_k:
            keep = keep[torch.topk(scores[keep], pre_nms_top_k).indices]
        anchor_idx = keep // num_classes
        boxes = apply_deltas(deltas[start:stop].detach()[anchor_idx].double(),
                             level_anchors[anchor_idx].double())
        xyxy = xywh_to_xyxy(boxes)
        xyxy[:, 0::2] = xyxy[:, 0::2].clamp(0, width)
        xyxy[:, 1::2] = xyxy[:, 1::2].clamp(0, height)
        boxes = torch.cat([xyxy[:, :2], xyxy[:, 2:] - xyxy[:, :2]], dim=1)
        ok = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
        boxes_out.append(boxes[ok])
        scores_out.append(scores[keep][ok])
        labels_out.append((keep % num_classes)[ok])
        start = stop
    return DetectionSet(
        torch.cat(boxes_out).numpy(),
        torch.cat(scores_out).double().numpy(),
        torch.cat(labels_out).numpy(),
    )
