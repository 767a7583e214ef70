"""Box geometry, burning intensity and VOC-style AP evaluation.

Boxes are center-format ``(cx, cy, w, h)`` in pixels. All arithmetic is
float64. Every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .exceptions import InvalidBoxError, InvalidWeightsError, ProtocolError, SchemaError

CLASSES = ("fire", "smoke")
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise InvalidBoxError(f"{name}={value!r} is not a number") from None
            if not math.isfinite(value):
                raise InvalidBoxError(f"{name}={value!r} is not finite")
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"degenerate box w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def scaled(self, s: float) -> "BBox":
        return BBox(self.cx * s, self.cy * s, self.w * s, self.h * s)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class BIWeights:
    """Weights of the area-difference term (``w1``) and the IoU term (``w2``)."""

    w1: float = 0.5
    w2: float = 0.5

    def __post_init__(self):
        w1, w2 = float(self.w1), float(self.w2)
        if not (math.isfinite(w1) and math.isfinite(w2)):
            raise InvalidWeightsError(f"non-finite weights ({w1}, {w2})")
        if w1 < 0 or w2 < 0:
            raise InvalidWeightsError(f"negative weights ({w1}, {w2})")
        if abs(w1 + w2 - 1.0) > 1e-12:
            raise InvalidWeightsError(f"weights must sum to 1, got {w1} + {w2} = {w1 + w2}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)


@dataclass(frozen=True)
class LabeledBox:
    box: BBox
    category: str
    confidence: float | None = None
    image_id: Hashable = None

    def __post_init__(self):
        if self.category not in CLASSES:
            raise SchemaError(f"unknown class {self.category!r}; expected one of {CLASSES}")
        if self.confidence is not None:
            c = float(self.confidence)
            if not (0.0 <= c <= 1.0):
                raise SchemaError(f"confidence {c} outside [0, 1]")
            object.__setattr__(self, "confidence", c)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    ap_per_class: dict[str, float]
    map: float
    avg_bi: float | None
    counts: tuple[int, int, int]
    num_matched: int = 0

    def as_dict(self) -> dict:
        return {
            "fire_ap": self.ap_per_class["fire"],
            "smoke_ap": self.ap_per_class["smoke"],
            "map": self.map,
            "avg_bi": self.avg_bi,
            "images": self.counts[0],
            "gts": self.counts[1],
            "dets": self.counts[2],
            "matched": self.num_matched,
        }


def _check_box(box) -> BBox:
    if not isinstance(box, BBox):
        raise InvalidBoxError(f"expected BBox, got {type(box).__name__}")
    return box


def area(box: BBox) -> float:
    box = _check_box(box)
    return box.w * box.h


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = _check_box(a).corners()
    bx1, by1, bx2, by2 = _check_box(b).corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # corner-derived areas so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, max(0.0, inter / union))


def area_diff_norm(a: BBox, b: BBox) -> float:
    """One minus the absolute area gap normalised by the larger area."""
    ad, ag = area(a), area(b)
    return 1.0 - abs(ad - ag) / max(ad, ag)


def burning_intensity(pred: BBox, gt: BBox, weights: BIWeights = BIWeights()) -> float:
    if not isinstance(weights, BIWeights):
        raise InvalidWeightsError(f"expected BIWeights, got {type(weights).__name__}")
    value = weights.w1 * area_diff_norm(pred, gt) + weights.w2 * iou(pred, gt)
    return min(1.0, max(0.0, value))


def _confidence_order(dets: Sequence[LabeledBox]) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -(dets[i].confidence or 0.0))


def match_detections(
    dets: Sequence[LabeledBox],
    gts: Sequence[LabeledBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Greedy per-class matching of one image's detections to ground truth.

    Detections are visited by descending confidence; each takes the unmatched
    same-class ground truth of highest IoU (lower index on ties) provided the
    IoU reaches ``iou_threshold``.
    """
    ids = {d.image_id for d in dets} | {g.image_id for g in gts}
    if len(ids) > 1:
        raise ProtocolError(f"match_detections got boxes from several images: {sorted(map(str, ids))}")

    taken = [False] * len(gts)
    result = MatchResult()
    for di in _confidence_order(dets):
        det = dets[di]
        best, best_iou = -1, -1.0
        for gi, gt in enumerate(gts):
            if taken[gi] or gt.category != det.category:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best < 0:
            result.unmatched_detections.append(di)
        else:
            taken[best] = True
            result.pairs.append((di, best, best_iou))
    result.unmatched_detections.sort()
    result.unmatched_gts = [i for i, t in enumerate(taken) if not t]
    return result


def ap_11point(scored_flags: Iterable[tuple[float, bool]], total_gts: int) -> float:
    """11-point interpolated average precision.

    Interpolated precision at recall level r is the best precision among all
    ranks whose recall is at least r (0 when no rank reaches r).
    """
    if total_gts < 0:
        raise ProtocolError(f"negative ground-truth count {total_gts}")
    flags = list(scored_flags)
    if total_gts == 0:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: -flags[i][0])
    best = [0.0] * 11
    tp = 0
    for rank, i in enumerate(order, start=1):
        if flags[i][1]:
            tp += 1
        precision = tp / rank
        # integer test of recall >= k/10
        reached = min(10, (10 * tp) // total_gts)
        for k in range(reached + 1):
            if precision > best[k]:
                best[k] = precision
    return sum(best) / 11.0


def evaluate(
    dets_by_image: Mapping[Hashable, Sequence[LabeledBox]],
    gts_by_image: Mapping[Hashable, Sequence[LabeledBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    weights: BIWeights = BIWeights(),
) -> EvalReport:
    """Per-class AP, mAP over fire/smoke and average BI over matched pairs."""
    unknown = set(dets_by_image) - set(gts_by_image)
    if unknown:
        raise ProtocolError(f"detections for images absent from ground truth: {sorted(map(str, unknown))[:5]}")

    flags = {c: [] for c in CLASSES}
    n_gts = {c: 0 for c in CLASSES}
    bi_values = []
    total_dets = 0
    for image_id in sorted(gts_by_image, key=str):
        gts = list(gts_by_image[image_id])
        dets = list(dets_by_image.get(image_id, ()))
        total_dets += len(dets)
        for box in (*gts, *dets):
            if box.category not in CLASSES:
                raise SchemaError(f"unknown class {box.category!r}")
        for cls in CLASSES:
            cls_gts = [g for g in gts if g.category == cls]
            cls_dets = [d for d in dets if d.category == cls]
            n_gts[cls] += len(cls_gts)
            match = match_detections(
                [LabeledBox(d.box, d.category, d.confidence, image_id) for d in cls_dets],
                [LabeledBox(g.box, g.category, None, image_id) for g in cls_gts],
                iou_threshold,
            )
            matched = {di for di, _, _ in match.pairs}
            for di, d in enumerate(cls_dets):
                flags[cls].append((d.confidence if d.confidence is not None else 0.0, di in matched))
            for di, gi, _ in match.pairs:
                bi_values.append(burning_intensity(cls_dets[di].box, cls_gts[gi].box, weights))

    ap = {c: ap_11point(flags[c], n_gts[c]) for c in CLASSES}
    mean_ap = sum(ap.values()) / len(ap)
    # math.fsum keeps avg BI independent of pair order
    avg_bi = math.fsum(bi_values) / len(bi_values) if bi_values else None
    return EvalReport(
        ap_per_class=ap,
        map=mean_ap,
        avg_bi=avg_bi,
        counts=(len(gts_by_image), sum(n_gts.values()), total_dets),
        num_matched=len(bi_values),
    )


# -- line-delimited record format -------------------------------------------

def format_number(x: float) -> str:
    text = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if text in ("", "-0") else text


def format_record(box: LabeledBox) -> str:
    b = box.box
    fields = [str(box.image_id), box.category] + [format_number(v) for v in (b.cx, b.cy, b.w, b.h)]
    if box.confidence is not None:
        fields.append(format_number(box.confidence))
    return ",".join(fields)


def parse_record(line: str, lineno: int | None = None) -> LabeledBox:
    where = f"line {lineno}: " if lineno is not None else ""
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) not in (6, 7):
        raise SchemaError(f"{where}expected 6 or 7 comma-separated fields, got {len(parts)}")
    image_id, category = parts[0], parts[1]
    if category not in CLASSES:
        raise SchemaError(f"{where}unknown class {category!r}")
    try:
        nums = [float(p) for p in parts[2:]]
    except ValueError as exc:
        raise SchemaError(f"{where}{exc}") from None
    try:
        box = BBox(*nums[:4])
        return LabeledBox(box, category, nums[4] if len(nums) == 5 else None, image_id)
    except (InvalidBoxError, SchemaError) as exc:
        raise SchemaError(f"{where}{exc}") from None


def write_records(boxes_by_image: Mapping[Hashable, Sequence[LabeledBox]], path) -> None:
    lines = []
    for image_id in sorted(boxes_by_image, key=str):
        for box in boxes_by_image[image_id]:
            lines.append(format_record(LabeledBox(box.box, box.category, box.confidence, image_id)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_records(path) -> dict[str, list[LabeledBox]]:
    out: dict[str, list[LabeledBox]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rec = parse_record(line, lineno)
            out.setdefault(rec.image_id, []).append(rec)
    return out
