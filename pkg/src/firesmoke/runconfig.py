"""Flat ``key = value`` run settings with a typed schema.

Precedence is command line over config file over defaults. Unknown keys and
unparsable values raise ``ConfigurationError``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .checkpoint import atomic_write_bytes
from .exceptions import ConfigurationError


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _size(text: str) -> tuple[int, int]:
    h, w = text.lower().split("x")
    return int(h), int(w)


def _sizes(text: str) -> tuple[tuple[int, int], ...]:
    return tuple(_size(v) for v in _strs(text))


@dataclass(frozen=True)
class Setting:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Setting] = {
    # detector architecture
    "input_size": Setting(_size, (128, 128), "network input HxW"),
    "pyramid_strides": Setting(_ints, (8, 16, 32), "feature pyramid strides"),
    "backbone_widths": Setting(_ints, (16, 32, 48, 64), "backbone stage widths"),
    "head_channels": Setting(int, 32, "head and pyramid width"),
    "attention": Setting(_bool, True, "enable the transparency attention block"),
    "placement": Setting(str, "shared", "attention placement: shared or per_branch"),
    "rescale_by_channels": Setting(_bool, True, "multiply attention scores by the channel count"),
    "score_threshold": Setting(float, 0.05, "minimum detection score"),
    "nms_iou": Setting(float, 0.6, "NMS IoU threshold"),
    "max_detections": Setting(int, 100, "detections kept per image"),
    # training
    "steps": Setting(int, 500, "optimizer steps"),
    "batch_size": Setting(int, 8, "images per step"),
    "lr": Setting(float, 0.01, "peak learning rate"),
    "momentum": Setting(float, 0.9, "SGD momentum"),
    "weight_decay": Setting(float, 1e-4, "weight decay on conv weights"),
    "warmup_steps": Setting(int, 50, "linear warmup steps"),
    "grad_clip": Setting(float, 10.0, "gradient norm clip (0 disables)"),
    "hflip": Setting(_bool, True, "random horizontal flips"),
    # data
    "name": Setting(str, "synth", "dataset name"),
    "count": Setting(int, 10, "synthetic images to generate"),
    "image_size": Setting(_size, (128, 128), "synthetic image HxW"),
    "alpha_min": Setting(float, 0.6, "lowest foreground opacity"),
    "alpha_max": Setting(float, 1.0, "highest foreground opacity"),
    "objects_min": Setting(int, 1, "fewest objects per synthetic image"),
    "objects_max": Setting(int, 3, "most objects per synthetic image"),
    "background": Setting(str, "gradient", "synthetic background: solid, gradient or textured"),
    "budget": Setting(int, 3000, "frames retained across all videos"),
    "train_fraction": Setting(float, 0.7, "share of images in the train split"),
    # evaluation
    "w1": Setting(float, 0.5, "burning intensity weight of the area term"),
    "w2": Setting(float, 0.5, "burning intensity weight of the IoU term"),
    "pairing": Setting(str, "match", "avg BI pairing: match (IoU >= 0.5) or index (k-th with k-th)"),
    "seeds": Setting(_ints, (0, 1, 2), "ablation seeds"),
    "variants": Setting(_strs, ("baseline", "+ATDH"), "ablation variants"),
    "train_count": Setting(int, 200, "ablation train images when synthesizing"),
    "test_count": Setting(int, 50, "ablation test images when synthesizing"),
    "level": Setting(int, 0, "pyramid level for CAM"),
    "classes": Setting(_strs, ("fire", "smoke"), "classes to render CAMs for"),
    "stats_sizes": Setting(_sizes, ((256, 256), (512, 512)), "input sizes for mult-add counts"),
}

ARCHITECTURE_KEYS = (
    "input_size", "pyramid_strides", "backbone_widths", "head_channels", "attention", "placement",
    "rescale_by_channels", "score_threshold", "nms_iou", "max_detections",
)
TRAINING_KEYS = ("steps", "batch_size", "lr", "momentum", "weight_decay", "warmup_steps", "grad_clip", "hflip")


def parse_value(key: str, text: str, where: str = "") -> Any:
    if key not in SCHEMA:
        raise ConfigurationError(f"{where}unknown config key {key!r}")
    try:
        return SCHEMA[key].parse(text)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"{where}bad value for {key!r}: {text!r} ({exc})") from None


def read_config_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror or exc}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, value, f"{path}:{lineno}: ")
    return values


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class RunConfig:
    settings: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    explicit: frozenset[str] = frozenset()  # keys set by file or command line

    @classmethod
    def build(cls, file_values: dict[str, Any] | None = None, overrides: dict[str, str] | None = None,
              seed: int = 0) -> "RunConfig":
        settings = {k: s.default for k, s in SCHEMA.items()}
        file_values = dict(file_values or {})
        for key in file_values:
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
        settings.update(file_values)
        parsed = {k: parse_value(k, v, "command line: ") for k, v in (overrides or {}).items()}
        settings.update(parsed)
        return cls(settings, int(seed), frozenset(file_values) | frozenset(parsed))

    def __getitem__(self, key: str):
        return self.settings[key]

    def subset(self, keys) -> dict[str, Any]:
        return {k: self.settings[k] for k in keys}

    def estimator_params(self) -> dict[str, Any]:
        return {**self.subset(ARCHITECTURE_KEYS + TRAINING_KEYS), "seed": self.seed}

    def sets_architecture(self) -> bool:
        return bool(self.explicit & set(ARCHITECTURE_KEYS))

    def as_json(self) -> dict:
        return {k: _jsonable(v) for k, v in sorted(self.settings.items())}

    def digest(self) -> str:
        payload = json.dumps({"settings": self.as_json(), "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def write_record(self, out_dir, command: str, extra: dict | None = None) -> None:
        """Reproducibility record: command, settings, digest, seed and toolkit version."""
        record = {
            "command": command,
            "config_digest": self.digest(),
            "seed": self.seed,
            "settings": self.as_json(),
            "version": __version__,
            **(extra or {}),
        }
        atomic_write_bytes(Path(out_dir) / "run.json", (json.dumps(record, sort_keys=True, indent=2) + "\n").encode())
