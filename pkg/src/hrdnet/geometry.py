"""Image pyramids, alignment padding and quadrant cropping.

Tensors passed to the model side of the package are laid out as
``(C, H, W)`` or ``(B, C, H, W)``; raster images carried by
:class:`AnnotatedImage` are ``(H, W, C)`` arrays as read from disk.
Boxes are always ``(x, y, w, h)`` in pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AlignmentError, InvalidInputError

# Fraction of a box's area that must survive clipping at a patch border.
MIN_RETAINED_AREA = 0.25


@dataclass
class ImagePyramid:
    images: list[torch.Tensor]
    alpha: float
    base_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [tuple(img.shape[-2:]) for img in self.images]


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))
    image_id: int | None = None
    file_name: str | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise InvalidInputError(
                f"{len(self.boxes)} boxes but {len(self.labels)} labels")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _as_tensor(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if not torch.is_floating_point(image):
        image = image.float()
    return image


def pyramid_divisor(n_streams: int, max_stride: int = 1) -> int:
    return max_stride * 2 ** (n_streams - 1)


def check_alignment(height: int, width: int, divisor: int, what: str = "image"):
    if height % divisor or width % divisor:
        raise AlignmentError(
            f"{what} size {height}x{width} is not divisible by {divisor}; "
            f"pad with pad_to_alignment first")


def resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a ``(C, H, W)`` or ``(B, C, H, W)`` tensor (half-pixel centers)."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    squeeze = image.dim() == 3
    batch = image.unsqueeze(0) if squeeze else image
    out = F.interpolate(batch, size=size, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def build_pyramid(image, n_streams: int, alpha: float = 0.5,
                  max_stride: int = 1) -> ImagePyramid:
    """Build an ``n_streams``-level image pyramid with scale ratio ``alpha``.

    Member ``i`` has size ``round(alpha**i * H) x round(alpha**i * W)``.
    With ``alpha == 0.5`` the input must be divisible by
    ``max_stride * 2**(n_streams - 1)`` so that every member is an exact
    integer halving of its predecessor.
    """
    image = _as_tensor(image)
    if n_streams < 1:
        raise InvalidInputError(f"n_streams must be >= 1, got {n_streams}")
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    if image.dim() not in (3, 4):
        raise InvalidInputError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(image.shape)}")
    height, width = image.shape[-2:]
    if height <= 0 or width <= 0 or image.shape[-3] <= 0:
        raise InvalidInputError(f"non-positive image dimensions {tuple(image.shape)}")
    if alpha == 0.5:
        check_alignment(height, width, pyramid_divisor(n_streams, max_stride))

    images = [image]
    for i in range(1, n_streams):
        size = (round(alpha ** i * height), round(alpha ** i * width))
        if min(size) < 1:
            raise InvalidInputError(f"pyramid member {i} collapses to {size}")
        images.append(resize(image, size))
    return ImagePyramid(images=images, alpha=alpha, base_size=(height, width))


def aligned_size(height: int, width: int, divisor: int) -> tuple[int, int]:
    return (math.ceil(height / divisor) * divisor, math.ceil(width / divisor) * divisor)


def pad_to_alignment(image, n_streams: int, alpha: float = 0.5, max_stride: int = 32):
    """Zero-pad the bottom/right edges up to the next multiple of the pyramid divisor.

    Returns ``(padded, (pad_bottom, pad_right))``. Box coordinates are
    unaffected because the origin does not move.
    """
    if alpha != 0.5:
        raise AlignmentError(f"alignment padding requires alpha=0.5, got {alpha}")
    if n_streams < 1 or max_stride < 1:
        raise InvalidInputError("n_streams and max_stride must be positive")
    image = _as_tensor(image)
    height, width = image.shape[-2:]
    if height <= 0 or width <= 0:
        raise InvalidInputError(f"non-positive image dimensions {tuple(image.shape)}")
    new_h, new_w = aligned_size(height, width, pyramid_divisor(n_streams, max_stride))
    pads = (new_h - height, new_w - width)
    if pads == (0, 0):
        return image, pads
    return F.pad(image, (0, pads[1], 0, pads[0])), pads


def quadrant_bounds(height: int, width: int) -> list[tuple[int, int, int, int]]:
    """(top, left, bottom, right) of the four patches: TL, TR, BL, BR."""
    mid_y, mid_x = (height + 1) // 2, (width + 1) // 2
    return [
        (0, 0, mid_y, mid_x),
        (0, mid_x, mid_y, width),
        (mid_y, 0, height, mid_x),
        (mid_y, mid_x, height, width),
    ]


def crop_quadrants(sample: AnnotatedImage) -> list[AnnotatedImage]:
    """Split a sample into four non-overlapping patches and remap its boxes.

    A box is kept in every patch it overlaps, clipped and shifted into the
    patch frame, unless less than :data:`MIN_RETAINED_AREA` of its area
    survives the clip.
    """
    height, width = sample.height, sample.width
    if height < 2 or width < 2:
        raise InvalidInputError(f"cannot crop a {height}x{width} image into quadrants")

    boxes = sample.boxes
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]

    patches = []
    for top, left, bottom, right in quadrant_bounds(height, width):
        cx1, cy1 = np.maximum(x1, left), np.maximum(y1, top)
        cx2, cy2 = np.minimum(x2, right), np.minimum(y2, bottom)
        cw, ch = cx2 - cx1, cy2 - cy1
        keep = (cw > 0) & (ch > 0) & (cw * ch >= MIN_RETAINED_AREA * areas)
        new_boxes = np.stack([cx1 - left, cy1 - top, cw, ch], axis=1)[keep]
        patches.append(AnnotatedImage(
            image=sample.image[top:bottom, left:right].copy(),
            boxes=new_boxes,
            labels=sample.labels[keep],
            image_id=sample.image_id,
            file_name=sample.file_name,
        ))
    return patches
