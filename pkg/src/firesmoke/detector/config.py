from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from ..atdh import HeadConfig
from ..exceptions import ConfigurationError

INF = math.inf


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture and post-processing settings of the anchor-free detector.

    Backbone and neck widths are desk-scale stand-ins, not canonical values.
    The feature pyramid width equals ``head.channels``.
    """

    input_size: tuple[int, int] = (256, 256)
    pyramid_strides: tuple[int, ...] = (8, 16, 32)
    level_ranges: tuple[tuple[float, float], ...] = ((0.0, 64.0), (64.0, 128.0), (128.0, INF))
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(channels=64, num_levels=3))
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100
    pre_nms_top_k: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "pyramid_strides", tuple(int(v) for v in self.pyramid_strides))
        object.__setattr__(self, "level_ranges", tuple((float(lo), float(hi)) for lo, hi in self.level_ranges))
        object.__setattr__(self, "backbone_widths", tuple(int(v) for v in self.backbone_widths))
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", HeadConfig(**self.head))
        self.validate()

    def validate(self) -> None:
        strides = self.pyramid_strides
        if not strides or any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigurationError(f"pyramid strides must be strictly increasing, got {strides}")
        for s in strides:
            if s < 4 or s & (s - 1):
                raise ConfigurationError(f"pyramid strides must be powers of two >= 4, got {s}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigurationError(f"bad input size {self.input_size}")
        ranges = self.level_ranges
        if len(ranges) != len(strides):
            raise ConfigurationError(f"{len(ranges)} level ranges for {len(strides)} pyramid levels")
        if ranges[0][0] != 0 or ranges[-1][1] != INF:
            raise ConfigurationError("level ranges must start at 0 and end at infinity")
        if any(lo >= hi for lo, hi in ranges) or any(a[1] != b[0] for a, b in zip(ranges, ranges[1:])):
            raise ConfigurationError(f"level ranges must be contiguous and increasing, got {ranges}")
        if len(self.backbone_widths) != self.num_stages or min(self.backbone_widths) < 1:
            raise ConfigurationError(
                f"max stride {strides[-1]} needs {self.num_stages} backbone widths, got {self.backbone_widths}"
            )
        if self.head.num_levels != len(strides):
            raise ConfigurationError(f"head has {self.head.num_levels} level scales for {len(strides)} levels")
        if self.head.input_channels != self.head.channels:
            raise ConfigurationError("the detector feeds the head at its own width; leave head.in_channels unset")
        if not 0 <= self.score_threshold <= 1 or not 0 < self.nms_iou <= 1 or self.max_detections < 1:
            raise ConfigurationError("score_threshold, nms_iou or max_detections out of range")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.pyramid_strides[-1])) - 1

    @property
    def max_stride(self) -> int:
        return self.pyramid_strides[-1]

    def check_input_size(self, height: int, width: int) -> None:
        s = self.max_stride
        if height % s or width % s:
            raise ConfigurationError(f"input {height}x{width} is not divisible by the largest stride {s}")

    def feature_sizes(self, height: int | None = None, width: int | None = None) -> list[tuple[int, int]]:
        h, w = self.input_size if height is None else (height, width)
        return [(h // s, w // s) for s in self.pyramid_strides]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        return cls(**data)

    def replace(self, **changes) -> "DetectorConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 50
    grad_clip: float = 10.0
    hflip: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0 or self.warmup_steps < 0:
            raise ConfigurationError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)
