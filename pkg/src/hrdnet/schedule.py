"""Learning-rate schedule: linear warm-up followed by step decay at fixed epochs."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class Schedule:
    base_lr: float = 0.02
    decay_epochs: list[int] = field(default_factory=lambda: [7, 11])
    decay_factor: float = 0.1
    warmup_iters: int = 500
    warmup_ratio: float = 1.0 / 3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    total_epochs: int = 12
    grad_clip: float | None = 35.0

    def validate(self, path: str = "schedule") -> None:
        if not 0.0 < self.warmup_ratio <= 1.0:
            raise ConfigError(f"{path}.warmup_ratio: must lie in (0, 1], got {self.warmup_ratio}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"{path}.decay_epochs: must be strictly increasing")
        if self.base_lr < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError(f"{path}: base_lr, weight_decay and momentum must be >= 0")
        if self.warmup_iters < 0 or self.total_epochs < 0:
            raise ConfigError(f"{path}: warmup_iters and total_epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"{path}.grad_clip: must be positive or null")


def lr_at(global_iter: int, epoch: int, schedule: Schedule) -> float:
    """Learning rate for a given iteration (counted over the whole run) and epoch.

    Decay steps take effect at the start of each listed epoch; during the
    first ``warmup_iters`` iterations the rate ramps linearly from
    ``warmup_ratio`` times the decayed rate up to the decayed rate.
    """
    lr = schedule.base_lr
    for boundary in schedule.decay_epochs:
        if epoch >= boundary:
            lr *= schedule.decay_factor
    if global_iter < schedule.warmup_iters:
        # dividing by the reciprocal keeps ratios like 1/3 exact: 0.02 / 3, not 0.02 * 0.333..
        start = lr / (1.0 / schedule.warmup_ratio)
        return start + (lr - start) * global_iter / schedule.warmup_iters
    return lr
