from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..boxmetrics import BBox, LabeledBox
from ..exceptions import ConfigurationError, IngestError
from ..seeding import derive_seed
from .manifest import Manifest

PAD_VALUE = 128


@dataclass(frozen=True)
class LetterboxTransform:
    """``x_out = x_in * scale + dx`` and ``y_out = y_in * scale + dy``."""

    scale: float
    dx: float
    dy: float

    def forward_box(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.cx * s + self.dx, box.cy * s + self.dy, box.w * s, box.h * s)

    def inverse_box(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.cx - self.dx) / s, (box.cy - self.dy) / s, box.w / s, box.h / s)

    def forward(self, labeled: LabeledBox) -> LabeledBox:
        return LabeledBox(self.forward_box(labeled.box), labeled.category, labeled.confidence, labeled.image_id)

    def inverse(self, labeled: LabeledBox) -> LabeledBox:
        return LabeledBox(self.inverse_box(labeled.box), labeled.category, labeled.confidence, labeled.image_id)


def letterbox(image: np.ndarray, target: tuple[int, int], stride: int = 32) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize into ``target`` (H, W), centred on neutral gray."""
    th, tw = (int(v) for v in target)
    if th % stride or tw % stride:
        raise ConfigurationError(f"letterbox target {th}x{tw} is not divisible by stride {stride}")
    h, w = image.shape[:2]
    scale = min(th / h, tw / w)
    nh, nw = min(th, round(h * scale)), min(tw, round(w * scale))
    top, left = (th - nh) // 2, (tw - nw) // 2
    if (nh, nw) == (h, w):
        resized = image
    else:
        resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((th, tw) + image.shape[2:], PAD_VALUE, dtype=image.dtype)
    canvas[top : top + nh, left : left + nw] = resized
    return canvas, LetterboxTransform(float(scale), float(left), float(top))


def split_manifest(manifest: Manifest, train_fraction: float = 0.7, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Seeded shuffle then prefix split; the train part gets ``round(n * fraction)`` records."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest.records)
    if n == 0:
        raise IngestError("cannot split an empty manifest")
    order = np.random.default_rng(derive_seed(seed, f"split:{manifest.name}")).permutation(n)
    n_train = int(round(n * train_fraction))
    train_idx, test_idx = sorted(order[:n_train]), sorted(order[n_train:])
    train = Manifest(f"{manifest.name}-train", [manifest.records[i] for i in train_idx], "train", manifest.root)
    test = Manifest(f"{manifest.name}-test", [manifest.records[i] for i in test_idx], "test", manifest.root)
    return train, test
