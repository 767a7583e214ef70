"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
import torch

from .boxmetrics import CLASSES, LabeledBox
from .exceptions import ConfigurationError, NumericError, SchemaError


def check_feature_map(fmap) -> None:
    if not isinstance(fmap, torch.Tensor):
        raise ConfigurationError(f"feature map must be a tensor, got {type(fmap).__name__}")
    if fmap.dim() not in (3, 4) or min(fmap.shape[-3:]) < 1:
        raise ConfigurationError(f"feature map must be (C, H, W) or (N, C, H, W), got {tuple(fmap.shape)}")
    if not torch.isfinite(fmap).all():
        raise NumericError("feature map contains non-finite values")


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a contiguous uint8 ``(H, W, 3)`` array."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"{name} must be (H, W, 3), got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.size and arr.max() <= 1.0:
            arr = arr * 255.0
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def check_annotations(boxes, name: str = "annotations") -> list[LabeledBox]:
    out = list(boxes)
    for b in out:
        if not isinstance(b, LabeledBox):
            raise SchemaError(f"{name} must contain LabeledBox, got {type(b).__name__}")
        if b.category not in CLASSES:
            raise SchemaError(f"unknown class {b.category!r}")
    return out


def check_dataset(X, y=None):
    """Validate parallel lists of images and per-image annotations."""
    images = [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if y is None:
        return images, None
    labels = [check_annotations(a, f"y[{i}]") for i, a in enumerate(y)]
    if len(labels) != len(images):
        raise ConfigurationError(f"X has {len(images)} images but y has {len(labels)} annotation lists")
    return images, labels
