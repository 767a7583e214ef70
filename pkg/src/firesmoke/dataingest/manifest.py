"""Line-delimited dataset manifests.

One image per line::

    image_id,path,width,height,class,cx,cy,w,h;class,cx,cy,w,h

The annotation block may be empty (a negative image). A header line
``# manifest name=<name> split=<split>`` carries the manifest metadata.
Paths are stored as given; relative paths resolve against the manifest's
directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..boxmetrics import BBox, CLASSES, LabeledBox, format_number
from ..checkpoint import atomic_write_bytes
from ..exceptions import IngestError, InvalidBoxError

SPLITS = ("train", "test", "all")


@dataclass
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    annotations: list[LabeledBox] = field(default_factory=list)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise IngestError(f"{self.image_id}: bad image size {self.width}x{self.height}")
        for token in (self.image_id, self.path):
            if any(ch in str(token) for ch in ",;\n"):
                raise IngestError(f"{token!r}: ids and paths may not contain ',', ';' or newlines")


@dataclass
class Manifest:
    name: str
    records: list[ImageRecord] = field(default_factory=list)
    split: str = "all"
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise IngestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if any(ch in self.name for ch in " \n"):
            raise IngestError(f"manifest name {self.name!r} may not contain whitespace")
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise IngestError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)

    def __len__(self):
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def ground_truth(self) -> dict[str, list[LabeledBox]]:
        return {
            r.image_id: [LabeledBox(a.box, a.category, None, r.image_id) for a in r.annotations]
            for r in self.records
        }

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_image(self, record: ImageRecord) -> np.ndarray:
        path = self.resolve(record)
        arr = read_image(path)
        if arr.shape[:2] != (record.height, record.width):
            raise IngestError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, manifest says {record.width}x{record.height}")
        return arr


def load_dataset(manifest: Manifest) -> list[tuple[np.ndarray, list[LabeledBox]]]:
    """Every image of ``manifest`` with its annotations, in manifest order."""
    gts = manifest.ground_truth()
    return [(manifest.load_image(r), gts[r.image_id]) for r in manifest.records]


def read_image(path) -> np.ndarray:
    """Decode any PIL-readable file to a uint8 RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise IngestError(f"{path}: cannot read image ({exc})") from None


def format_manifest_line(record: ImageRecord) -> str:
    anns = ";".join(
        ",".join([a.category] + [format_number(v) for v in (a.box.cx, a.box.cy, a.box.w, a.box.h)])
        for a in record.annotations
    )
    return f"{record.image_id},{record.path},{record.width},{record.height},{anns}"


def parse_manifest_line(line: str, lineno: int) -> ImageRecord:
    parts = line.rstrip("\n").split(",", 4)
    if len(parts) < 4:
        raise IngestError(f"line {lineno}: expected image_id,path,width,height[,annotations]")
    image_id, path, width, height = (p.strip() for p in parts[:4])
    try:
        width_i, height_i = int(width), int(height)
    except ValueError:
        raise IngestError(f"line {lineno}: width/height must be integers, got {width!r}, {height!r}") from None
    annotations = []
    block = parts[4].strip() if len(parts) == 5 else ""
    for ann in filter(None, (a.strip() for a in block.split(";"))):
        fields = [f.strip() for f in ann.split(",")]
        if len(fields) != 5:
            raise IngestError(f"line {lineno}: annotation {ann!r} needs class,cx,cy,w,h")
        if fields[0] not in CLASSES:
            raise IngestError(f"line {lineno}: unknown class {fields[0]!r}")
        try:
            box = BBox(*(float(v) for v in fields[1:]))
        except (ValueError, InvalidBoxError) as exc:
            raise IngestError(f"line {lineno}: {exc}") from None
        annotations.append(LabeledBox(box, fields[0], None, image_id))
    try:
        return ImageRecord(image_id, path, width_i, height_i, annotations)
    except IngestError as exc:
        raise IngestError(f"line {lineno}: {exc}") from None


def dumps_manifest(manifest: Manifest) -> str:
    lines = [f"# manifest name={manifest.name} split={manifest.split}"]
    lines += [format_manifest_line(r) for r in manifest.records]
    return "\n".join(lines) + "\n"


def save_manifest(manifest: Manifest, path) -> None:
    atomic_write_bytes(path, dumps_manifest(manifest).encode("utf-8"))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror or exc}") from None
    name, split = path.stem, "all"
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            if stripped.startswith("# manifest"):
                meta = dict(tok.split("=", 1) for tok in stripped.split()[2:] if "=" in tok)
                name, split = meta.get("name", name), meta.get("split", split)
            continue
        records.append(parse_manifest_line(line, lineno))
    try:
        return Manifest(name, records, split, root=path.parent)
    except IngestError as exc:
        raise IngestError(f"{path}: {exc}") from None

