"""Per-location training targets for the anchor-free head.

A location at pyramid level ``k`` sits at pixel ``(j + 0.5) * s, (i + 0.5) * s``
for stride ``s``. It is positive for a ground-truth box when it lies strictly
inside the box and the largest of its four edge distances falls in the
level's ``(lo, hi]`` range; if several boxes qualify the smallest area wins,
then the lower box index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..boxmetrics import CLASSES, LabeledBox
from .config import DetectorConfig

BACKGROUND = -1


@dataclass
class LevelTargets:
    cls: np.ndarray  # (H, W) int64, class index or BACKGROUND
    reg: np.ndarray  # (4, H, W) float32 pixel distances l, t, r, b
    centerness: np.ndarray  # (1, H, W) float32


@dataclass
class TargetMap:
    levels: list[LevelTargets]

    @property
    def num_positive(self) -> int:
        return int(sum((lv.cls >= 0).sum() for lv in self.levels))


def location_grid(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(width, dtype=np.float64) + 0.5) * stride
    ys = (np.arange(height, dtype=np.float64) + 0.5) * stride
    return xs, ys


def centerness_of(reg: np.ndarray) -> np.ndarray:
    l, t, r, b = reg
    with np.errstate(invalid="ignore", divide="ignore"):
        lr = np.minimum(l, r) / np.maximum(l, r)
        tb = np.minimum(t, b) / np.maximum(t, b)
        out = np.sqrt(lr * tb)
    return np.nan_to_num(out, nan=0.0)


def clip_box(box: LabeledBox, height: int, width: int) -> tuple[float, float, float, float] | None:
    x1, y1, x2, y2 = box.box.corners()
    x1, x2 = max(0.0, x1), min(float(width), x2)
    y1, y2 = max(0.0, y1), min(float(height), y2)
    if x2 <= x1 or y2 <= y1:
        return None
    return x1, y1, x2, y2


def assign_targets(gts: Sequence[LabeledBox], config: DetectorConfig, image_size=None) -> TargetMap:
    height, width = config.input_size if image_size is None else image_size
    corners, labels = [], []
    for g in gts:
        c = clip_box(g, height, width)
        if c is not None:
            corners.append(c)
            labels.append(CLASSES.index(g.category))
    boxes = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])

    levels = []
    for (fh, fw), stride, (lo, hi) in zip(
        config.feature_sizes(height, width), config.pyramid_strides, config.level_ranges
    ):
        xs, ys = location_grid(fh, fw, stride)
        cls = np.full((fh, fw), BACKGROUND, dtype=np.int64)
        reg = np.zeros((4, fh, fw), dtype=np.float64)
        if len(boxes):
            l = xs[None, None, :] - boxes[:, 0, None, None]
            t = ys[None, :, None] - boxes[:, 1, None, None]
            r = boxes[:, 2, None, None] - xs[None, None, :]
            b = boxes[:, 3, None, None] - ys[None, :, None]
            l, t, r, b = np.broadcast_arrays(l, t, r, b)
            dist = np.stack([l, t, r, b], axis=1)  # (G, 4, H, W)
            inside = dist.min(axis=1) > 0
            reach = dist.max(axis=1)
            ok = inside & (reach > lo) & (reach <= hi)
            cost = np.where(ok, areas[:, None, None], np.inf)
            best = cost.argmin(axis=0)  # first index wins ties
            positive = np.isfinite(cost.min(axis=0))
            cls = np.where(positive, labels[best], BACKGROUND)
            picked = np.take_along_axis(dist, best[None, None], axis=0)[0]
            reg = np.where(positive[None], picked, 0.0)
        ctr = np.where(cls >= 0, centerness_of(reg), 0.0)[None]
        levels.append(LevelTargets(cls, reg.astype(np.float32), ctr.astype(np.float32)))
    return TargetMap(levels)
