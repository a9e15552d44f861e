"""Small building blocks and seeded initialisation shared by the networks."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def group_count(channels: int, max_groups: int = 8) -> int:
    # at least two channels per group, so 1x1 maps still normalise over > 1 value
    return math.gcd(channels, max(1, min(max_groups, channels // 2)))


def conv3x3(c_in: int, c_out: int, stride: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=bias)


def conv1x1(c_in: int, c_out: int, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 1, bias=bias)


def upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def init_weights(module: nn.Module, generator: torch.Generator, scheme: str = "kaiming") -> None:
    """Seeded init: convs by ``scheme``, identity affine for norms, zero biases.

    ``kaiming`` is fan-out scaled normal (backbones and head towers),
    ``xavier`` uniform (fusion convs), ``normal`` has std 0.01. Modules are
    visited in registration order, so a fixed seed gives identical weights.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if scheme == "kaiming":
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu",
                                        generator=generator)
            elif scheme == "xavier":
                nn.init.xavier_uniform_(m.weight, generator=generator)
            elif scheme == "normal":
                nn.init.normal_(m.weight, std=0.01, generator=generator)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g
