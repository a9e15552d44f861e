"""Multi-depth image pyramid network: parallel residual backbones, one per pyramid member.

Level indexing is coarse to fine: level 0 has the largest stride and level
``M - 1`` the smallest (stride 4, right after the stem).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import AlignmentError, ConfigError
from .geometry import ImagePyramid, check_alignment
from .layers import conv3x3, group_count, init_weights, seeded_generator

STEM_STRIDE = 4


@dataclass
class StreamSpec:
    stream_index: int
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stem_channels: int = 16

    @property
    def levels(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def coarsest_stride(self) -> int:
        return STEM_STRIDE * 2 ** (self.levels - 1)

    def validate(self, path: str = "stream") -> None:
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise ConfigError(
                f"{path}: blocks_per_stage has {len(self.blocks_per_stage)} entries "
                f"but stage_channels has {len(self.stage_channels)}")
        if not self.blocks_per_stage:
            raise ConfigError(f"{path}: at least one stage is required")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ConfigError(f"{path}.blocks_per_stage: block counts must be >= 0")
        if self.stem_channels <= 0 or any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"{path}: channel counts must be positive")


def validate_stream_specs(specs: list[StreamSpec], path: str = "stream_specs") -> None:
    """Reject configs whose depth decreases along the pyramid or whose level counts differ."""
    if not specs:
        raise ConfigError(f"{path}: at least one stream is required")
    for i, spec in enumerate(specs):
        spec.validate(f"{path}[{i}]")
        if spec.stream_index != i:
            raise ConfigError(f"{path}[{i}].stream_index: expected {i}, got {spec.stream_index}")
    levels = {s.levels for s in specs}
    if len(levels) != 1:
        raise ConfigError(f"{path}: all streams need the same number of levels, got {sorted(levels)}")
    for i in range(1, len(specs)):
        if specs[i].total_blocks < specs[i - 1].total_blocks:
            raise ConfigError(
                f"{path}[{i}]: depth must be non-decreasing with stream index "
                f"({specs[i].total_blocks} blocks < {specs[i - 1].total_blocks})")


@dataclass
class FeatureMap:
    """One feature map; ``data`` is batched as ``(B, C, H, W)``."""
    data: torch.Tensor
    stream_index: int
    level_index: int
    stride: int

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass
class FeatureGroup:
    maps: list[FeatureMap]

    @property
    def stream_index(self) -> int:
        return self.maps[0].stream_index

    def tensors(self) -> list[torch.Tensor]:
        return [m.data for m in self.maps]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, j: int) -> FeatureMap:
        return self.maps[j]


class PreActBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(channels), channels)
        self.conv1 = conv3x3(channels, channels)
        self.norm2 = nn.GroupNorm(group_count(channels), channels)
        self.conv2 = conv3x3(channels, channels)
        self.relu = nn.ReLU()

    def forward(self, x):
        out = self.conv1(self.relu(self.norm1(x)))
        out = self.conv2(self.relu(self.norm2(out)))
        return x + out


class StreamModel(nn.Module):
    """Stride-4 stem followed by ``M`` residual stages; stage ``k > 0`` halves resolution."""

    def __init__(self, spec: StreamSpec, input_channels: int = 3):
        super().__init__()
        spec.validate()
        if input_channels <= 0:
            raise ConfigError("input_channels must be positive")
        self.spec = spec
        c = spec.stem_channels
        self.stem = nn.Sequential(
            conv3x3(input_channels, c, stride=2),
            nn.GroupNorm(group_count(c), c),
            nn.ReLU(),
            conv3x3(c, c, stride=2),
            nn.GroupNorm(group_count(c), c),
            nn.ReLU(),
        )
        stages = []
        c_prev = c
        for k, (n_blocks, c_out) in enumerate(zip(spec.blocks_per_stage, spec.stage_channels)):
            stride = 1 if k == 0 else 2
            proj = (conv3x3(c_prev, c_out, stride=stride)
                    if stride != 1 or c_prev != c_out else nn.Identity())
            stages.append(nn.Sequential(proj, *[PreActBlock(c_out) for _ in range(n_blocks)]))
            c_prev = c_out
        self.stages = nn.ModuleList(stages)

    @property
    def levels(self) -> int:
        return self.spec.levels

    @property
    def out_channels(self) -> list[int]:
        """Channels per level, coarse to fine."""
        return list(reversed(self.spec.stage_channels))

    @property
    def strides(self) -> list[int]:
        """Stride per level, coarse to fine."""
        return [self.spec.coarsest_stride // 2 ** j for j in range(self.levels)]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_alignment(x.shape[-2], x.shape[-1], self.spec.coarsest_stride,
                        f"stream {self.spec.stream_index} input")
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[::-1]


def build_stream(spec: StreamSpec, input_channels: int = 3, seed: int = 0) -> StreamModel:
    model = StreamModel(spec, input_channels)
    init_weights(model, seeded_generator(seed))
    return model


def extract_features(model: StreamModel, image: torch.Tensor) -> FeatureGroup:
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    outs = model(x)
    i = model.spec.stream_index
    return FeatureGroup([
        FeatureMap(o, stream_index=i, level_index=j, stride=s)
        for j, (o, s) in enumerate(zip(outs, model.strides))
    ])


class MDIPN(nn.Module):
    """``N`` independent streams; stream ``i`` consumes pyramid member ``i``."""

    def __init__(self, specs: list[StreamSpec], input_channels: int = 3, seed: int = 0):
        super().__init__()
        validate_stream_specs(specs)
        self.streams = nn.ModuleList(
            build_stream(spec, input_channels, seed=seed + 1000 * i)
            for i, spec in enumerate(specs))

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def levels(self) -> int:
        return self.streams[0].levels

    @property
    def max_stride(self) -> int:
        return self.streams[0].spec.coarsest_stride

    def forward(self, images: list[torch.Tensor]) -> list[list[torch.Tensor]]:
        if len(images) != len(self.streams):
            raise ConfigError(f"{len(images)} pyramid images for {len(self.streams)} streams")
        return [stream(img) for stream, img in zip(self.streams, images)]


def forward_mdipn(pyramid: ImagePyramid, models) -> list[FeatureGroup]:
    models = list(models.streams) if isinstance(models, MDIPN) else list(models)
    if len(models) != len(pyramid.images):
        raise ConfigError(f"{len(pyramid.images)} pyramid images for {len(models)} stream models")
    validate_stream_specs([m.spec for m in models])
    groups = []
    for model, image in zip(models, pyramid.images):
        try:
            groups.append(extract_features(model, image))
        except AlignmentError as exc:
            raise AlignmentError(f"stream {model.spec.stream_index}: {exc}") from exc
    return groups


def count_parameters(*modules: nn.Module | None) -> int:
    """Number of trainable scalars across the given modules (shared tensors counted once)."""
    seen = set()
    total = 0
    for module in modules:
        if module is None:
            continue
        mods = module if isinstance(module, (list, tuple)) else [module]
        for m in mods:
            for p in m.parameters():
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    total += p.numel()
    return total
