from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..atdh import ATDHead, ConvGNReLU, HeadOutput, group_count
from ..checkpoint import load_arrays, load_state_checked, save_arrays, state_arrays
from ..exceptions import ConfigurationError
from .config import DetectorConfig

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(group_count(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(channels), channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(y)))


class Backbone(nn.Module):
    """Stride-2 stem then one stride-2 stage per width; stage ``i`` has stride ``2**(i + 2)``."""

    def __init__(self, widths: Sequence[int], out_strides: Sequence[int]):
        super().__init__()
        self.stem = ConvGNReLU(3, widths[0], stride=2)
        self.stages = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.stages.append(nn.Sequential(ConvGNReLU(prev, w, stride=2), ResidualBlock(w)))
            prev = w
        self.out_strides = tuple(out_strides)
        self.out_channels = [widths[int(np.log2(s)) - 2] for s in self.out_strides]

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        maps = {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            maps[2 ** (i + 2)] = x
        return [maps[s] for s in self.out_strides]


class FeaturePyramid(nn.Module):
    """Top-down fusion: 1x1 laterals, nearest upsample-and-add, 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], width: int):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in in_channels)

    def forward(self, maps: Sequence[Tensor]) -> list[Tensor]:
        if len(maps) != len(self.lateral):
            raise ConfigurationError(f"pyramid built for {len(self.lateral)} levels, got {len(maps)}")
        for m, c in zip(maps, self.in_channels):
            if m.shape[-3] != c:
                raise ConfigurationError(f"pyramid expects {self.in_channels} channels, got {[t.shape[-3] for t in maps]}")
        laterals = [conv(m) for conv, m in zip(self.lateral, maps)]
        merged = [None] * len(laterals)
        merged[-1] = laterals[-1]
        for i in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(merged[i + 1], size=laterals[i].shape[-2:], mode="nearest")
            merged[i] = laterals[i] + up
        return [conv(m) for conv, m in zip(self.smooth, merged)]


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone_widths, config.pyramid_strides)
        self.neck = FeaturePyramid(self.backbone.out_channels, config.head.channels)
        self.head = ATDHead(config.head)
        for m in list(self.backbone.modules()) + list(self.neck.modules()):
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def pyramid(self, images: Tensor) -> list[Tensor]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"images must be (N, 3, H, W), got {tuple(images.shape)}")
        self.config.check_input_size(images.shape[-2], images.shape[-1])
        return self.neck(self.backbone(images))

    def forward(self, images: Tensor) -> list[HeadOutput]:
        return self.head(self.pyramid(images))

    def forward_with_features(self, images: Tensor) -> tuple[list[HeadOutput], list[Tensor]]:
        """Head outputs plus the post-attention classification features per level."""
        outputs, feats = [], []
        for level, p in enumerate(self.pyramid(images)):
            cls_feat, reg_feat = self.head.features(p)
            feats.append(cls_feat)
            outputs.append(self.head.project(cls_feat, reg_feat, level))
        return outputs, feats


def preprocess(images: Sequence[np.ndarray] | np.ndarray) -> Tensor:
    """uint8 ``(H, W, 3)`` images to a normalised float ``(N, 3, H, W)`` batch."""
    arr = images if isinstance(images, np.ndarray) else np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


def backbone_forward(image: Tensor, config: DetectorConfig, params: Mapping[str, Tensor] | None = None) -> list[Tensor]:
    backbone = Backbone(config.backbone_widths, config.pyramid_strides)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    config.check_input_size(image.shape[-2], image.shape[-1])
    if params is None:
        return backbone(image)
    return torch.func.functional_call(backbone, dict(params), (image,))


def fuse_features(maps: Sequence[Tensor], params: Mapping[str, Tensor]) -> list[Tensor]:
    """Run the top-down pyramid with explicit ``FeaturePyramid`` parameters."""
    n = len(maps)
    try:
        in_channels = [params[f"lateral.{i}.weight"].shape[1] for i in range(n)]
        width = params["lateral.0.weight"].shape[0]
    except KeyError as exc:
        raise ConfigurationError(f"missing pyramid parameter {exc}") from None
    neck = FeaturePyramid(in_channels, width)
    expected = {k: tuple(v.shape) for k, v in neck.state_dict().items()}
    if expected != {k: tuple(v.shape) for k, v in params.items()}:
        raise ConfigurationError("pyramid parameters do not match the feature maps")
    return torch.func.functional_call(neck, dict(params), (list(maps),))


def save_detector(path, model: Detector) -> None:
    save_arrays(path, "detector", model.config.to_dict(), state_arrays(model))


def load_detector(path, expected: DetectorConfig | None = None) -> Detector:
    kind, config, arrays = load_arrays(path)
    if kind != "detector":
        raise ConfigurationError(f"{path}: expected a detector checkpoint, found {kind!r}")
    config = DetectorConfig.from_dict(config)
    if expected is not None and expected != config:
        raise ConfigurationError(f"{path}: checkpoint config does not match the requested config")
    return load_state_checked(Detector(config), arrays).eval()
