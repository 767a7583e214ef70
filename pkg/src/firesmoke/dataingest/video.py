"""Video to frame extraction with seeded random retention."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from ..exceptions import IngestError
from ..seeding import derive_seed
from .manifest import ImageRecord, Manifest, save_manifest
from .transforms import split_manifest

VIDEO_SUFFIXES = (".avi", ".mkv", ".mov", ".mp4", ".mpg", ".webm")


def count_frames(video) -> int:
    cap = cv2.VideoCapture(str(video))
    if not cap.isOpened():
        raise IngestError(f"{video}: cannot open video")
    n = 0
    try:
        while cap.grab():
            n += 1
    finally:
        cap.release()
    if n == 0:
        raise IngestError(f"{video}: no decodable frames")
    return n


def retained_indices(num_frames: int, budget: int, seed: int, purpose: str = "") -> list[int]:
    """Sorted frame indices kept after uniformly deleting down to ``budget``."""
    if budget < 1:
        raise IngestError(f"frame budget must be >= 1, got {budget}")
    if budget >= num_frames:
        return list(range(num_frames))
    rng = np.random.default_rng(derive_seed(seed, f"frames:{purpose}"))
    return sorted(rng.choice(num_frames, size=budget, replace=False).tolist())


def allocate_budget(frame_counts: Sequence[int], total: int) -> list[int]:
    """Split ``total`` across videos proportionally to their frame counts.

    Largest-remainder rounding; no video gets more than it has, and the
    surplus flows to videos with frames to spare, so the result sums to
    ``min(total, sum(frame_counts))``.
    """
    counts = np.asarray(frame_counts, dtype=np.int64)
    if total < 0 or (counts < 0).any():
        raise IngestError("budget and frame counts must be non-negative")
    target = int(min(total, counts.sum()))
    alloc = np.zeros_like(counts)
    remaining = target
    open_ = counts > 0
    while remaining > 0 and open_.any():
        share = remaining * counts[open_] / counts[open_].sum()
        base = np.floor(share).astype(np.int64)
        rem = share - base
        order = np.argsort(-rem, kind="stable")
        base[order[: remaining - base.sum()]] += 1
        idx = np.flatnonzero(open_)
        alloc[idx] = np.minimum(alloc[idx] + base, counts[idx])
        remaining = target - int(alloc.sum())
        open_ = alloc < counts
    return alloc.tolist()


def extract_frames(video, budget: int, seed: int, out_dir, prefix: str | None = None) -> list[ImageRecord]:
    """Decode every frame, keep a seeded random subset of ``budget`` frames in
    time order, write them as PNG under ``out_dir``.

    Records carry paths relative to ``out_dir`` and no annotations.
    """
    video = Path(video)
    out_dir = Path(out_dir)
    prefix = prefix or video.stem
    total = count_frames(video)
    keep = set(retained_indices(total, budget, seed, purpose=video.name))
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    cap = cv2.VideoCapture(str(video))
    try:
        for index in range(total):
            ok, frame = cap.read()
            if not ok:
                raise IngestError(f"{video}: decoding stopped at frame {index} of {total}")
            if index not in keep:
                continue
            image_id = f"{prefix}_f{index:06d}"
            rel = f"{image_id}.png"
            rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            Image.fromarray(rgb).save(out_dir / rel)
            records.append(ImageRecord(image_id, rel, rgb.shape[1], rgb.shape[0], []))
    finally:
        cap.release()
    return records


def extract_videos(videos: Sequence, total_budget: int, seed: int, out_dir) -> list[ImageRecord]:
    """Proportional per-video retention so the whole collection keeps ``total_budget`` frames."""
    videos = sorted(Path(v) for v in videos)
    if not videos:
        raise IngestError("no videos given")
    counts = [count_frames(v) for v in videos]
    records = []
    for video, share in zip(videos, allocate_budget(counts, total_budget)):
        if share > 0:
            records.extend(extract_frames(video, share, seed, out_dir))
    return records


def find_videos(inputs: Sequence) -> list[Path]:
    """Expand directories to the video files directly inside them."""
    found = []
    for item in map(Path, inputs):
        if item.is_dir():
            found.extend(p for p in item.iterdir() if p.suffix.lower() in VIDEO_SUFFIXES)
        elif item.exists():
            found.append(item)
        else:
            raise IngestError(f"{item}: no such file or directory")
    return sorted(found)


def ingest_videos(inputs: Sequence, total_budget: int, seed: int, out_dir, name: str = "frames",
                  train_fraction: float = 0.7) -> tuple[Manifest, Manifest, Manifest]:
    """Extract frames under ``out_dir/frames`` and write full, train and test manifests.

    Extracted frames carry no annotations; label them before training.
    """
    out_dir = Path(out_dir)
    records = extract_videos(find_videos(inputs), total_budget, seed, out_dir / "frames")
    records = [ImageRecord(r.image_id, f"frames/{r.path}", r.width, r.height, r.annotations) for r in records]
    full = Manifest(name, sorted(records, key=lambda r: r.image_id), "all", root=out_dir)
    train, test = split_manifest(full, train_fraction, seed)
    for m in (full, train, test):
        save_manifest(m, out_dir / f"{m.name}.manifest")
    return full, train, test
