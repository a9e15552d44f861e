"""Declarative model/training configuration, stored as YAML."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .head import DEFAULT_RATIOS, DEFAULT_SCALES
from .msfpn import FusionConfig
from .postprocess import NMS_IOU, SCORE_THRESHOLD, TEST_SCALES
from .schedule import Schedule
from .streams import StreamSpec, validate_stream_specs


@dataclass
class HeadConfig:
    num_classes: int = 5
    anchor_scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    anchor_ratios: list[float] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    tower_convs: int = 2
    reg_weight: float = 1.0
    score_threshold: float = SCORE_THRESHOLD
    nms_iou: float = NMS_IOU
    pre_nms_top_k: int = 1000
    max_detections: int = 500

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def validate(self, path: str = "head") -> None:
        if self.num_classes <= 0:
            raise ConfigError(f"{path}.num_classes: must be positive")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError(f"{path}: anchor_scales and anchor_ratios must be non-empty")
        if any(v <= 0 for v in [*self.anchor_scales, *self.anchor_ratios]):
            raise ConfigError(f"{path}: anchor scales and ratios must be positive")
        if self.tower_convs < 0:
            raise ConfigError(f"{path}.tower_convs: must be >= 0")
        if not 0.0 <= self.score_threshold < 1.0:
            raise ConfigError(f"{path}.score_threshold: must lie in [0, 1)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError(f"{path}.nms_iou: must lie in (0, 1]")


@dataclass
class DataConfig:
    train: str | None = None
    val: str | None = None


@dataclass
class HRDNetConfig:
    n_streams: int = 2
    alpha: float = 0.5
    levels: int = 4
    stream_specs: list[StreamSpec] = field(default_factory=lambda: [
        StreamSpec(0, [1, 1, 1, 1], [16, 32, 64, 128], 16),
        StreamSpec(1, [2, 2, 2, 2], [16, 32, 64, 128], 16),
    ])
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    schedule: Schedule = field(default_factory=Schedule)
    data: DataConfig = field(default_factory=DataConfig)
    resolution: tuple[int, int] = (256, 256)
    seed: int = 0
    batch_size: int = 2
    train_on_patches: bool = False
    mix_full_images: bool = False
    eval_interval: int = 1
    test_scales: list[float] = field(default_factory=lambda: list(TEST_SCALES))
    input_channels: int = 3

    def validate(self) -> "HRDNetConfig":
        if self.n_streams < 1:
            raise ConfigError("n_streams: must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha: must lie in (0, 1], got {self.alpha}")
        if len(self.stream_specs) != self.n_streams:
            raise ConfigError(
                f"stream_specs: {len(self.stream_specs)} entries for n_streams={self.n_streams}")
        validate_stream_specs(self.stream_specs)
        for i, spec in enumerate(self.stream_specs):
            if spec.levels != self.levels:
                raise ConfigError(
                    f"stream_specs[{i}].blocks_per_stage: {spec.levels} stages but levels={self.levels}")
        self.fusion.validate()
        if self.fusion.strategy != "simple_fpn" and self.alpha != 0.5:
            raise ConfigError(
                f"alpha: fusion.strategy={self.fusion.strategy!r} needs alpha=0.5 so that "
                f"cross-stream maps align by exact 2x factors, got {self.alpha}")
        self.head.validate()
        self.schedule.validate()
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ConfigError("resolution: must be a positive (height, width) pair")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval: must be >= 1")
        if not self.test_scales or any(s <= 0 for s in self.test_scales):
            raise ConfigError("test_scales: must be a non-empty list of positive factors")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HRDNetConfig":
        d = copy.deepcopy(d or {})
        _check_keys(cls, d, "")
        kwargs = {}
        nested = {"fusion": FusionConfig, "head": HeadConfig,
                  "schedule": Schedule, "data": DataConfig}
        for key, value in d.items():
            if key in nested:
                _check_keys(nested[key], value, f"{key}.")
                kwargs[key] = nested[key](**value)
            elif key == "stream_specs":
                specs = []
                for i, s in enumerate(value):
                    _check_keys(StreamSpec, s, f"stream_specs[{i}].")
                    specs.append(StreamSpec(**s))
                kwargs[key] = specs
            elif key == "resolution":
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def copy(self, **changes) -> "HRDNetConfig":
        d = self.to_dict()
        d.update(changes)
        return HRDNetConfig.from_dict(d)


def _check_keys(cls, d, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")


def load_config(path) -> HRDNetConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return HRDNetConfig.from_dict(doc)


def dump_config(cfg: HRDNetConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: HRDNetConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
