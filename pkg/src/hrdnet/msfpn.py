"""Multi-scale feature pyramid: fuses the per-stream feature groups into one pyramid.

Three wirings are supported:

``aligned_by_depth``
    ``fused[i][j] = lat(raw[i][j]) + up(fused[i][j-1]) + up(fused[i+1][j])``
``aligned_by_resolution``
    ``fused[i][j] = lat(raw[i][j]) + up(fused[i][j-1]) + cross(fused[i+1][j+1])``
``simple_fpn``
    an ordinary FPN per stream; stream 0 then adds every other stream's
    output at the same level after a 1x1 conv and ``2**i`` upsampling.

Streams are processed deepest first and levels coarse to fine, so every
source on the right-hand side is already fused. The fusion path is linear
(bias-free 1x1 convs, nearest upsampling, sums).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError, ConfigError
from .layers import conv1x1, conv3x3, init_weights, seeded_generator, upsample
from .streams import FeatureGroup, FeatureMap

STRATEGIES = ("simple_fpn", "aligned_by_resolution", "aligned_by_depth")


@dataclass
class FusionConfig:
    strategy: str = "aligned_by_depth"
    common_channels: int = 256
    extra_levels: int = 1

    def validate(self, path: str = "fusion") -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"{path}.strategy: must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.common_channels <= 0:
            raise ConfigError(f"{path}.common_channels: must be positive")
        if self.extra_levels < 0:
            raise ConfigError(f"{path}.extra_levels: must be >= 0")


@dataclass
class OutputPyramid:
    """``maps[k]`` is the projection of fused stream-0 level ``k``; extra coarser levels follow."""
    maps: list[FeatureMap]

    def tensors(self) -> list[torch.Tensor]:
        return [m.data for m in self.maps]

    @property
    def strides(self) -> list[int]:
        return [m.stride for m in self.maps]

    def by_stride(self) -> list[FeatureMap]:
        return sorted(self.maps, key=lambda m: m.stride)

    def __len__(self):
        return len(self.maps)


def _check_shape(a: torch.Tensor, b: torch.Tensor, i: int, j: int, what: str):
    if a.shape[-2:] != b.shape[-2:]:
        raise AlignmentError(
            f"fusion at stream {i}, level {j}: {what} has spatial size "
            f"{tuple(b.shape[-2:])}, expected {tuple(a.shape[-2:])}")


class MSFPN(nn.Module):
    def __init__(self, in_channels: list[list[int]], cfg: FusionConfig, seed: int = 0,
                 alpha: float = 0.5):
        """``in_channels[i][j]`` is the raw channel count of stream ``i`` at level ``j``."""
        super().__init__()
        cfg.validate()
        if cfg.strategy != "simple_fpn" and alpha != 0.5:
            raise ConfigError(f"{cfg.strategy} needs alpha=0.5, got {alpha}")
        self.cfg = cfg
        self.alpha = alpha
        self.n_streams = len(in_channels)
        self.levels = len(in_channels[0])
        if any(len(row) != self.levels for row in in_channels):
            raise ConfigError("all streams must expose the same number of levels")
        c = cfg.common_channels
        self.lateral = nn.ModuleList(
            nn.ModuleList(conv1x1(cin, c) for cin in row) for row in in_channels)
        # cross-stream 1x1 convs; only the strategies that use them get entries
        n, m = self.n_streams, self.levels
        cross = nn.ModuleDict()
        if cfg.strategy == "aligned_by_resolution":
            for i in range(n - 1):
                for j in range(m - 1):
                    cross[f"{i}_{j}"] = conv1x1(c, c)
        elif cfg.strategy == "simple_fpn":
            for i in range(1, n):
                for j in range(m):
                    cross[f"{i}_{j}"] = conv1x1(c, c)
        self.cross = cross
        init_weights(self, seeded_generator(seed), "xavier")

    def forward(self, raw: list[list[torch.Tensor]]) -> list[list[torch.Tensor]]:
        if len(raw) != self.n_streams or any(len(r) != self.levels for r in raw):
            raise ConfigError(
                f"expected {self.n_streams} streams x {self.levels} levels of features")
        if self.cfg.strategy == "aligned_by_depth":
            return self._aligned_by_depth(raw)
        if self.cfg.strategy == "aligned_by_resolution":
            return self._aligned_by_resolution(raw)
        return self._simple_fpn(raw)

    def _aligned_by_depth(self, raw):
        n, m = self.n_streams, self.levels
        fused = [None] * n
        for i in reversed(range(n)):
            row = [None] * m
            for j in range(m):
                x = self.lateral[i][j](raw[i][j])
                if j > 0:
                    up = upsample(row[j - 1])
                    _check_shape(x, up, i, j, "upsampled coarser level")
                    x = x + up
                if i < n - 1:
                    up = upsample(fused[i + 1][j])
                    _check_shape(x, up, i, j, "upsampled deeper stream")
                    x = x + up
                row[j] = x
            fused[i] = row
        return fused

    def _aligned_by_resolution(self, raw):
        n, m = self.n_streams, self.levels
        fused = [None] * n
        for i in reversed(range(n)):
            row = [None] * m
            for j in range(m):
                x = self.lateral[i][j](raw[i][j])
                if j > 0:
                    up = upsample(row[j - 1])
                    _check_shape(x, up, i, j, "upsampled coarser level")
                    x = x + up
                if i < n - 1 and j + 1 < m:
                    src = self.cross[f"{i}_{j}"](fused[i + 1][j + 1])
                    _check_shape(x, src, i, j, "equal-resolution deeper stream")
                    x = x + src
                row[j] = x
            fused[i] = row
        return fused

    def _simple_fpn(self, raw):
        n, m = self.n_streams, self.levels
        fpn = []
        for i in range(n):
            row = []
            for j in range(m):
                x = self.lateral[i][j](raw[i][j])
                if j > 0:
                    up = upsample(row[j - 1])
                    _check_shape(x, up, i, j, "upsampled coarser level")
                    x = x + up
                row.append(x)
            fpn.append(row)
        merged = list(fpn[0])
        for i in range(1, n):
            for j in range(m):
                src = self.cross[f"{i}_{j}"](fpn[i][j])
                if self.alpha == 0.5:
                    up = upsample(src, 2 ** i)
                else:
                    up = F.interpolate(src, size=merged[j].shape[-2:], mode="nearest")
                _check_shape(merged[j], up, 0, j, f"stream {i} FPN output")
                merged[j] = merged[j] + up
        return [merged] + fpn[1:]


class OutputProjection(nn.Module):
    """3x3 conv per fused stream-0 level, plus stride-2 convs for extra coarser levels."""

    def __init__(self, levels: int, cfg: FusionConfig, seed: int = 0):
        super().__init__()
        c = cfg.common_channels
        self.levels = levels
        self.smooth = nn.ModuleList(conv3x3(c, c, bias=True) for _ in range(levels))
        self.extra = nn.ModuleList(conv3x3(c, c, stride=2, bias=True)
                                   for _ in range(cfg.extra_levels))
        init_weights(self, seeded_generator(seed), "xavier")

    def forward(self, fused0: list[torch.Tensor]) -> list[torch.Tensor]:
        outs = [conv(x) for conv, x in zip(self.smooth, fused0)]
        prev = outs[0]
        for conv in self.extra:
            prev = conv(prev)
            outs.append(prev)
        return outs


def wrap_fused(fused, strides0: list[int]) -> list[FeatureGroup]:
    groups = []
    for i, row in enumerate(fused):
        groups.append(FeatureGroup([
            FeatureMap(x, stream_index=i, level_index=j, stride=s)
            for j, (x, s) in enumerate(zip(row, strides0))
        ]))
    return groups


def _run(groups: list[FeatureGroup], fpn: MSFPN, strategy: str) -> list[FeatureGroup]:
    if fpn.cfg.strategy != strategy:
        raise ConfigError(f"fusion module was built for {fpn.cfg.strategy!r}, not {strategy!r}")
    fused = fpn([g.tensors() for g in groups])
    return wrap_fused(fused, [m.stride for m in groups[0].maps])


def fuse_aligned_by_depth(groups: list[FeatureGroup], fpn: MSFPN) -> list[FeatureGroup]:
    return _run(groups, fpn, "aligned_by_depth")


def fuse_aligned_by_resolution(groups: list[FeatureGroup], fpn: MSFPN) -> list[FeatureGroup]:
    return _run(groups, fpn, "aligned_by_resolution")


def fuse_simple_fpn(groups: list[FeatureGroup], fpn: MSFPN) -> list[FeatureGroup]:
    return _run(groups, fpn, "simple_fpn")


def project_outputs(fused_group0: FeatureGroup, projection: OutputProjection) -> OutputPyramid:
    outs = projection(fused_group0.tensors())
    strides = [m.stride for m in fused_group0.maps]
    coarsest = strides[0]
    for k in range(len(outs) - len(strides)):
        strides.append(coarsest * 2 ** (k + 1))
    return OutputPyramid([
        FeatureMap(x, stream_index=0, level_index=k, stride=s)
        for k, (x, s) in enumerate(zip(outs, strides))
    ])
