"""Readers for common public annotation layouts.

``from_voc`` reads Pascal VOC XML files (one per image, ``<object><name>``
plus ``<bndbox>`` corners). ``from_yolo`` reads YOLO txt files (one line per
object: ``class_index cx cy w h`` normalised to [0, 1]) next to their
images. Both produce a ``Manifest`` with paths relative to ``root``.
Class names are lower-cased; objects of other classes are skipped.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

from PIL import Image

from ..boxmetrics import CLASSES, BBox, LabeledBox
from ..exceptions import IngestError, InvalidBoxError
from .manifest import ImageRecord, Manifest

IMAGE_SUFFIXES = (".bmp", ".jpeg", ".jpg", ".png")


def _text(node, tag: str, where: str) -> str:
    child = node.find(tag)
    if child is None or child.text is None:
        raise IngestError(f"{where}: missing <{tag}>")
    return child.text.strip()


def from_voc(annotation_dir, image_dir, name: str = "voc", root=None) -> Manifest:
    annotation_dir, image_dir = Path(annotation_dir), Path(image_dir)
    root = Path(root) if root is not None else image_dir
    records = []
    for xml_path in sorted(annotation_dir.glob("*.xml")):
        try:
            tree = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise IngestError(f"{xml_path}: {exc}") from None
        filename = _text(tree, "filename", str(xml_path))
        size = tree.find("size")
        if size is None:
            raise IngestError(f"{xml_path}: missing <size>")
        width, height = int(_text(size, "width", str(xml_path))), int(_text(size, "height", str(xml_path)))
        image_id = Path(filename).stem
        boxes = []
        for obj in tree.iter("object"):
            category = _text(obj, "name", str(xml_path)).lower()
            if category not in CLASSES:
                continue
            bb = obj.find("bndbox")
            if bb is None:
                raise IngestError(f"{xml_path}: object without <bndbox>")
            try:
                corners = [float(_text(bb, t, str(xml_path))) for t in ("xmin", "ymin", "xmax", "ymax")]
                boxes.append(LabeledBox(BBox.from_corners(*corners), category, None, image_id))
            except (ValueError, InvalidBoxError) as exc:
                raise IngestError(f"{xml_path}: {exc}") from None
        path = Path(image_dir, filename)
        records.append(ImageRecord(image_id, str(path.relative_to(root) if path.is_relative_to(root) else path),
                                   width, height, boxes))
    return Manifest(name, records, "all", root=root)


def from_yolo(image_dir, class_names: Sequence[str] = CLASSES, name: str = "yolo") -> Manifest:
    """Images and same-stem ``.txt`` label files in one directory; a missing label file is a negative image."""
    image_dir = Path(image_dir)
    names = [n.lower() for n in class_names]
    records = []
    for image_path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            with Image.open(image_path) as im:
                width, height = im.size
        except OSError as exc:
            raise IngestError(f"{image_path}: {exc}") from None
        boxes = []
        label_path = image_path.with_suffix(".txt")
        if label_path.exists():
            for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
                fields = line.split()
                if not fields:
                    continue
                if len(fields) != 5:
                    raise IngestError(f"{label_path}:{lineno}: expected 'class cx cy w h'")
                try:
                    index = int(fields[0])
                    cx, cy, w, h = (float(v) for v in fields[1:])
                except ValueError as exc:
                    raise IngestError(f"{label_path}:{lineno}: {exc}") from None
                if not 0 <= index < len(names):
                    raise IngestError(f"{label_path}:{lineno}: class index {index} out of range")
                if names[index] not in CLASSES:
                    continue
                try:
                    box = BBox(cx * width, cy * height, w * width, h * height)
                except InvalidBoxError as exc:
                    raise IngestError(f"{label_path}:{lineno}: {exc}") from None
                boxes.append(LabeledBox(box, names[index], None, image_path.stem))
        records.append(ImageRecord(image_path.stem, image_path.name, width, height, boxes))
    return Manifest(name, records, "all", root=image_dir)
