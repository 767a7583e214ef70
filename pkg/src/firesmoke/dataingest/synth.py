"""Procedural fire/smoke scenes with controllable foreground opacity.

Fire is a cluster of warm Gaussian blobs, smoke a gray plume modulated by
smooth value noise. Each object is alpha-composited over the background
with a per-object opacity drawn from ``alpha_range``; its ground-truth box is
the tight pixel extent of its (truncated) mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from ..boxmetrics import BBox, CLASSES, LabeledBox
from ..exceptions import ConfigurationError
from ..seeding import derive_seed
from .manifest import ImageRecord, Manifest

BACKGROUNDS = ("solid", "gradient", "textured")
MASK_CUTOFF = 0.08


@dataclass(frozen=True)
class SynthSpec:
    count: int = 10
    image_size: tuple[int, int] = (128, 128)
    alpha_range: tuple[float, float] = (0.6, 1.0)
    objects_per_image: tuple[int, int] = (1, 3)
    background_mode: str = "gradient"
    seed: int = 0
    size_range: tuple[int, int] = (20, 56)
    name: str = "synth"

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError(f"alpha_range must satisfy 0 < lo <= hi <= 1, got {self.alpha_range}")
        if self.count < 1:
            raise ConfigurationError(f"count must be >= 1, got {self.count}")
        if self.background_mode not in BACKGROUNDS:
            raise ConfigurationError(f"background_mode must be one of {BACKGROUNDS}")
        omin, omax = self.objects_per_image
        if not 0 <= omin <= omax:
            raise ConfigurationError(f"bad objects_per_image {self.objects_per_image}")
        smin, smax = self.size_range
        if not 4 <= smin <= smax <= min(self.image_size):
            raise ConfigurationError(f"bad size_range {self.size_range} for image {self.image_size}")


@dataclass
class Scene:
    image: np.ndarray
    background: np.ndarray
    boxes: list[LabeledBox]
    masks: list[np.ndarray] = field(default_factory=list)  # full-size opacity maps actually painted


def _smooth_noise(rng, shape, cells: int) -> np.ndarray:
    h, w = shape
    grid = rng.random((cells + 1, cells + 1)).astype(np.float32)
    return cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC).clip(0, 1)


def _background(rng, spec: SynthSpec) -> np.ndarray:
    h, w = spec.image_size
    base = rng.uniform(30, 220, size=3)
    if spec.background_mode == "solid":
        img = np.broadcast_to(base, (h, w, 3)).astype(np.float32)
    elif spec.background_mode == "gradient":
        other = rng.uniform(30, 220, size=3)
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        t = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
        t = (t - t.min()) / max(float(t.max() - t.min()), 1e-6)
        img = base * (1 - t[..., None]) + other * t[..., None]
    else:
        noise = _smooth_noise(rng, (h, w), 8)[..., None]
        other = rng.uniform(30, 220, size=3)
        img = base * (1 - noise) + other * noise
    return img.astype(np.float32)


def _fire_patch(rng, bh: int, bw: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float32)
    mask = np.zeros((bh, bw), np.float32)
    for _ in range(rng.integers(2, 5)):
        cy = rng.uniform(0.35, 0.75) * bh
        cx = rng.uniform(0.3, 0.7) * bw
        sy, sx = rng.uniform(0.18, 0.3) * bh, rng.uniform(0.15, 0.25) * bw
        mask = np.maximum(mask, np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)))
    mask = np.clip(mask * 1.6, 0, 1)
    core = np.array([255, 235, 90], np.float32)
    rim = np.array([235, 70, 15], np.float32)
    color = rim + (core - rim) * (mask[..., None] ** 2)
    return mask, color


def _smoke_patch(rng, bh: int, bw: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float32)
    envelope = np.exp(-0.5 * (((yy - bh / 2) / (0.25 * bh)) ** 2 + ((xx - bw / 2) / (0.25 * bw)) ** 2))
    texture = 0.55 + 0.45 * _smooth_noise(rng, (bh, bw), 4)
    mask = np.clip(envelope * texture * 1.7, 0, 1)
    gray = rng.uniform(170, 235)
    shade = gray - 40 * _smooth_noise(rng, (bh, bw), 3)
    color = np.repeat(shade[..., None], 3, axis=2).astype(np.float32)
    return mask, color


def _overlaps(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def render_scene(rng: np.random.Generator, spec: SynthSpec, image_id=None) -> Scene:
    h, w = spec.image_size
    background = _background(rng, spec)
    img = background.copy()
    placed, boxes, masks = [], [], []
    n_objects = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    for _ in range(n_objects):
        for _attempt in range(30):
            bw = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            bh = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            if not any(_overlaps((x0, y0, x0 + bw, y0 + bh), p) for p in placed):
                break
        else:
            continue
        category = CLASSES[int(rng.integers(0, len(CLASSES)))]
        patch_mask, patch_color = (_fire_patch if category == "fire" else _smoke_patch)(rng, bh, bw)
        patch_mask[patch_mask < MASK_CUTOFF] = 0
        ys, xs = np.nonzero(patch_mask)
        if not len(ys):
            continue
        alpha = float(rng.uniform(*spec.alpha_range))
        full = np.zeros((h, w), np.float32)
        full[y0 : y0 + bh, x0 : x0 + bw] = patch_mask * alpha
        region = img[y0 : y0 + bh, x0 : x0 + bw]
        a = (patch_mask * alpha)[..., None]
        img[y0 : y0 + bh, x0 : x0 + bw] = region * (1 - a) + patch_color * a
        x1, x2 = x0 + xs.min(), x0 + xs.max() + 1
        y1, y2 = y0 + ys.min(), y0 + ys.max() + 1
        placed.append((x0, y0, x0 + bw, y0 + bh))
        boxes.append(LabeledBox(BBox.from_corners(float(x1), float(y1), float(x2), float(y2)), category, None, image_id))
        masks.append(full)
    to_u8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return Scene(to_u8(img), to_u8(background), boxes, masks)


def generate_scenes(spec: SynthSpec):
    """Yield ``(image_id, Scene)``; scene ``i`` depends only on (seed, i)."""
    for i in range(spec.count):
        image_id = f"{spec.name}{i:05d}"
        rng = np.random.default_rng(derive_seed(spec.seed, f"synth:{i}"))
        yield image_id, render_scene(rng, spec, image_id)


def synth_transparent(spec: SynthSpec, out_dir) -> Manifest:
    """Write ``spec.count`` PNG images under ``out_dir/images`` and return their manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, scene in generate_scenes(spec):
        rel = f"images/{image_id}.png"
        Image.fromarray(scene.image).save(out_dir / rel)
        h, w = scene.image.shape[:2]
        records.append(ImageRecord(image_id, rel, w, h, scene.boxes))
    return Manifest(spec.name, records, "all", root=out_dir)


def synth_dataset(spec: SynthSpec) -> list[tuple[np.ndarray, list[LabeledBox]]]:
    """In-memory variant of :func:`synth_transparent`."""
    return [(scene.image, scene.boxes) for _, scene in generate_scenes(spec)]


def foreground_contrast(scene: Scene) -> float:
    """Mean RGB distance between composite and background over painted pixels."""
    if not scene.masks:
        return 0.0
    painted = np.max(np.stack(scene.masks), axis=0) > 0
    diff = scene.image.astype(np.float64) - scene.background.astype(np.float64)
    return float(np.linalg.norm(diff, axis=2)[painted].mean())
