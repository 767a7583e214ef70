"""Dataset manifests, frame extraction, splitting, letterboxing and synthetic scenes."""

from .adapters import from_voc, from_yolo
from .manifest import ImageRecord, Manifest, dumps_manifest, load_dataset, load_manifest, read_image, save_manifest
from .synth import Scene, SynthSpec, foreground_contrast, generate_scenes, synth_dataset, synth_transparent
from .transforms import LetterboxTransform, letterbox, split_manifest
from .video import allocate_budget, count_frames, extract_frames, extract_videos, find_videos, ingest_videos, retained_indices

__all__ = [
    "ImageRecord",
    "LetterboxTransform",
    "Manifest",
    "Scene",
    "SynthSpec",
    "allocate_budget",
    "count_frames",
    "dumps_manifest",
    "extract_frames",
    "extract_videos",
    "foreground_contrast",
    "from_voc",
    "from_yolo",
    "find_videos",
    "generate_scenes",
    "ingest_videos",
    "letterbox",
    "load_dataset",
    "load_manifest",
    "read_image",
    "retained_indices",
    "save_manifest",
    "split_manifest",
    "synth_dataset",
    "synth_transparent",
]
