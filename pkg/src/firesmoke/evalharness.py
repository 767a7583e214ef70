"""Inference over manifests, AP/avg-BI reports, the attention ablation, and CAM heatmaps.

Every artifact written here is a pure function of its inputs and seed, so
reruns produce byte-identical files. Wall time is the one exception and
lives in its own ``timing.json`` beside the run record.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

from . import __version__
from .boxmetrics import (
    CLASSES, BIWeights, EvalReport, LabeledBox, burning_intensity, evaluate, read_records, write_records,
)
from .checkpoint import atomic_write_bytes
from .dataingest.manifest import Manifest
from .dataingest.transforms import letterbox
from .detector import Detector, DetectorConfig, TrainConfig, load_detector, preprocess, train
from .estimator import predict_image
from .exceptions import ConfigurationError, NumericError, ProtocolError
from .validation import check_image

logger = logging.getLogger(__name__)

VARIANTS = {"baseline": False, "+ATDH": True}


# --- run records ---------------------------------------------------------

def config_digest(config: DetectorConfig, checkpoint_digest: str = "") -> str:
    payload = json.dumps({"config": config.to_dict(), "checkpoint": checkpoint_digest}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class RunRecord:
    model_id: str
    dataset_name: str
    seed: int
    config_digest: str
    store: str | None = None
    version: str = __version__
    wall_time: float | None = field(default=None, compare=False)

    def dumps(self) -> str:
        """Stable JSON without wall time, so repeated runs give identical bytes."""
        data = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        return json.dumps(data, sort_keys=True, indent=2) + "\n"


def run_dir(out, digest: str, seed: int) -> Path:
    return Path(out) / f"{digest[:12]}-seed{seed}"


def write_run_record(directory, record: RunRecord) -> None:
    directory = Path(directory)
    atomic_write_bytes(directory / "run.json", record.dumps().encode())
    if record.wall_time is not None:
        atomic_write_bytes(directory / "timing.json", json.dumps({"wall_time_s": record.wall_time}).encode())


# --- inference and reports ----------------------------------------------

def _as_model(checkpoint, config: DetectorConfig | None) -> Detector:
    if isinstance(checkpoint, Detector):
        if config is not None and checkpoint.config != config:
            raise ConfigurationError("model config does not match the requested config")
        return checkpoint.eval()
    return load_detector(checkpoint, expected=config)


def run_inference(checkpoint, manifest: Manifest, config: DetectorConfig | None = None,
                  out_path=None) -> dict[str, list[LabeledBox]]:
    """Detections for every manifest image in source-pixel coordinates.

    ``checkpoint`` is a path or a loaded ``Detector``. With ``out_path`` the
    store is also written in the record line format, sorted by image id.
    """
    model = _as_model(checkpoint, config)
    store = {}
    for record in sorted(manifest.records, key=lambda r: r.image_id):
        image = manifest.load_image(record)
        store[record.image_id] = predict_image(model, image, record.image_id)
    if out_path is not None:
        write_records(store, out_path)
    return store


def report(store, manifest: Manifest, weights: BIWeights = BIWeights()) -> EvalReport:
    """Evaluate a detection store (mapping or file) against the manifest's annotations."""
    if not isinstance(store, Mapping):
        store = read_records(store)
    gts = manifest.ground_truth()
    unknown = sorted(set(map(str, store)) - set(gts))
    if unknown:
        raise ProtocolError(f"detections for images not in manifest {manifest.name!r}: {unknown[:5]}")
    dets = {image_id: list(store.get(image_id, [])) for image_id in gts}
    return evaluate(dets, gts, weights=weights)


PAIRINGS = ("match", "index")


def _load_store(store) -> dict:
    return store if isinstance(store, Mapping) else read_records(store)


def store_report(dets, gts, weights: BIWeights = BIWeights()) -> EvalReport:
    """Compare two record stores. Images absent from a store have no boxes there."""
    dets, gts = _load_store(dets), _load_store(gts)
    ids = set(dets) | set(gts)
    return evaluate({i: dets.get(i, []) for i in ids}, {i: gts.get(i, []) for i in ids}, weights=weights)


@dataclass(frozen=True)
class BISummary:
    avg_bi: float | None
    pairs: int
    pairing: str


def bi_summary(dets, gts, weights: BIWeights = BIWeights(), pairing: str = "match") -> BISummary:
    """Average burning intensity of a detection store against a ground-truth store.

    ``"match"`` pairs boxes the way :func:`evaluate` does (IoU >= 0.5, same
    class). ``"index"`` treats the stores as explicit pair lists: the k-th
    record of an image in one store pairs with the k-th in the other.
    """
    if pairing == "match":
        rep = store_report(dets, gts, weights)
        return BISummary(rep.avg_bi, rep.num_matched, pairing)
    if pairing != "index":
        raise ConfigurationError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    dets, gts = _load_store(dets), _load_store(gts)
    values = []
    for image_id in sorted(set(dets) | set(gts), key=str):
        d, g = dets.get(image_id, []), gts.get(image_id, [])
        if len(d) != len(g):
            raise ProtocolError(f"image {image_id!r}: {len(d)} detections but {len(g)} ground-truth boxes to pair")
        values += [burning_intensity(a.box, b.box, weights) for a, b in zip(d, g)]
    return BISummary(math.fsum(values) / len(values) if values else None, len(values), pairing)


def format_bi_table(summary: BISummary, weights: BIWeights) -> str:
    row = [f"{weights.w1:g}", f"{weights.w2:g}", summary.pairing, str(summary.pairs),
           "-" if summary.avg_bi is None else f"{summary.avg_bi:.6f}"]
    return _aligned(("w1", "w2", "pairing", "pairs", "avg BI"), [row])


def bi_record(summary: BISummary, weights: BIWeights) -> str:
    return json.dumps({"w1": weights.w1, "w2": weights.w2, "pairing": summary.pairing, "pairs": summary.pairs,
                       "avg_bi": summary.avg_bi}, sort_keys=True) + "\n"


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *map(line, rows)]) + "\n"


REPORT_COLUMNS = ("model", "dataset", "Fire AP", "Smoke AP", "mAP", "avg BI")


def format_report_table(rep: EvalReport, model: str, dataset: str) -> str:
    row = [model, dataset, _pct(rep.ap_per_class["fire"]), _pct(rep.ap_per_class["smoke"]), _pct(rep.map),
           "-" if rep.avg_bi is None else f"{rep.avg_bi:.4f}"]
    return _aligned(REPORT_COLUMNS, [row])


def report_record(rep: EvalReport, model: str, dataset: str) -> str:
    return json.dumps({"model": model, "dataset": dataset, **rep.as_dict()}, sort_keys=True) + "\n"


def write_report(rep: EvalReport, out_dir, model: str, dataset: str) -> None:
    out_dir = Path(out_dir)
    atomic_write_bytes(out_dir / "report.txt", format_report_table(rep, model, dataset).encode())
    atomic_write_bytes(out_dir / "report.jsonl", report_record(rep, model, dataset).encode())


# --- ablation ------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    variant: str
    dataset: str
    seed: int
    fire_ap: float | None
    smoke_ap: float | None
    failed: bool = False

    @property
    def map(self) -> float | None:
        if self.failed:
            return None
        return (self.fire_ap + self.smoke_ap) / 2


@dataclass(frozen=True)
class AblationCell:
    mean: float
    min: float
    max: float


@dataclass(frozen=True)
class AblationSummary:
    variant: str
    dataset: str
    fire: AblationCell | None
    smoke: AblationCell | None
    runs: int
    failed: int
    map_range: tuple[float, float] | None = None  # min and max of per-seed mAP

    @property
    def map(self) -> float | None:
        # mean of the class means, so the row obeys mAP = mean(Fire, Smoke) exactly
        if self.fire is None:
            return None
        return (self.fire.mean + self.smoke.mean) / 2


@dataclass
class AblationTable:
    dataset: str
    rows: list[AblationRow] = field(default_factory=list)

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def summary(self, variant: str) -> AblationSummary:
        rows = [r for r in self.rows if r.variant == variant]
        ok = [r for r in rows if not r.failed]
        if not ok:
            return AblationSummary(variant, self.dataset, None, None, len(rows), len(rows))
        cell = lambda vs: AblationCell(statistics.fmean(vs), min(vs), max(vs))
        maps = [r.map for r in ok]
        return AblationSummary(
            variant, self.dataset, cell([r.fire_ap for r in ok]), cell([r.smoke_ap for r in ok]),
            len(rows), len(rows) - len(ok), (min(maps), max(maps)),
        )

    def mean_map(self, variant: str) -> float | None:
        return self.summary(variant).map

    def format_text(self) -> str:
        """Per-variant means with [min, max] over seeds, in percent."""
        header = ("Method", "Dataset", "Fire", "Smoke", "mAP", "runs")
        body = []
        for v in self.variants():
            s = self.summary(v)
            if s.fire is None:
                body.append([v, s.dataset, "FAILED", "FAILED", "FAILED", f"0/{s.runs}"])
                continue
            fmt = lambda c: f"{100 * c.mean:.2f} [{100 * c.min:.2f}, {100 * c.max:.2f}]"
            lo, hi = s.map_range
            flag = "" if not s.failed else f" ({s.failed} failed)"
            body.append([v, s.dataset, fmt(s.fire), fmt(s.smoke),
                         f"{100 * s.map:.2f} [{100 * lo:.2f}, {100 * hi:.2f}]", f"{s.runs - s.failed}/{s.runs}{flag}"])
        per_seed = [
            [r.variant, r.dataset, f"seed {r.seed}", *(("FAILED",) * 3 if r.failed else
                                                       (_pct(r.fire_ap), _pct(r.smoke_ap), _pct(r.map)))]
            for r in self.rows
        ]
        return _aligned(header, body) + "\n" + _aligned(("Method", "Dataset", "Seed", "Fire", "Smoke", "mAP"), per_seed)

    def format_records(self) -> str:
        lines = [json.dumps({**asdict(r), "map": r.map}, sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        atomic_write_bytes(out_dir / "ablation.txt", self.format_text().encode())
        atomic_write_bytes(out_dir / "ablation.jsonl", self.format_records().encode())


def _fit_to_input(data, config: DetectorConfig):
    out = []
    for image, boxes in data:
        image = check_image(image)
        if image.shape[:2] == config.input_size:
            out.append((image, list(boxes)))
        else:
            canvas, tf = letterbox(image, config.input_size, config.max_stride)
            out.append((canvas, [tf.forward(b) for b in boxes]))
    return out


def evaluate_model(model: Detector, data, weights: BIWeights = BIWeights()) -> EvalReport:
    dets, gts = {}, {}
    for i, (image, boxes) in enumerate(data):
        dets[i] = predict_image(model, image, i)
        gts[i] = [LabeledBox(b.box, b.category, None, i) for b in boxes]
    return evaluate(dets, gts, weights=weights)


def ablate(train_data, test_data, config: DetectorConfig, variants: Sequence[str] = tuple(VARIANTS),
           seeds: Sequence[int] = (0,), train_config: TrainConfig = TrainConfig(),
           dataset_name: str = "synth") -> AblationTable:
    """Train every (variant, seed) pair on identical data and seeds, evaluate on ``test_data``.

    Variants are names from ``VARIANTS``; they differ only in whether the
    head's attention is enabled. A diverged run becomes a failed row.
    """
    if not variants:
        raise ProtocolError("ablation needs at least one variant")
    if not seeds:
        raise ProtocolError("ablation needs at least one seed")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    train_data = _fit_to_input(train_data, config)
    test_data = list(test_data)
    table = AblationTable(dataset_name)
    for variant in variants:
        head = config.head.__class__(**{**config.head.to_dict(), "attention_enabled": VARIANTS[variant]})
        variant_config = config.replace(head=head)
        for seed in seeds:
            try:
                model = train(train_data, variant_config, seed=seed, train_config=train_config).model
                rep = evaluate_model(model, test_data)
                row = AblationRow(variant, dataset_name, seed, rep.ap_per_class["fire"], rep.ap_per_class["smoke"])
            except NumericError as exc:
                logger.warning("%s seed %d diverged: %s", variant, seed, exc)
                row = AblationRow(variant, dataset_name, seed, None, None, failed=True)
            logger.info("ablation %s seed %d -> %s", variant, seed, row)
            table.rows.append(row)
    return table


# --- CAM -----------------------------------------------------------------

def cam(checkpoint, image, category: str, level: int = 0) -> np.ndarray:
    """Gradient-weighted class activation map at the post-attention features.

    The target is the summed sigmoid score of ``category`` over the level;
    channel weights are its spatially averaged gradients. The rectified map
    is upsampled to the model input size and scaled so its max is 1; a map
    with no positive response is returned as all zeros.
    """
    if category not in CLASSES:
        raise ConfigurationError(f"unknown class {category!r}; choose from {CLASSES}")
    model = _as_model(checkpoint, None)
    config = model.config
    if not 0 <= level < len(config.pyramid_strides):
        raise ConfigurationError(f"level {level} out of range for {len(config.pyramid_strides)} levels")
    image = check_image(image)
    if image.shape[:2] != config.input_size:
        image, _ = letterbox(image, config.input_size, config.max_stride)
    with torch.enable_grad():
        outputs, feats = model.forward_with_features(preprocess([image]))
        feat = feats[level]
        target = torch.sigmoid(outputs[level].cls_logits[0, CLASSES.index(category)]).sum()
        (grad,) = torch.autograd.grad(target, feat)
    weights = grad[0].mean(dim=(1, 2))
    raw = torch.relu((weights[:, None, None] * feat[0]).sum(0)).detach().double().numpy()
    return normalize_heatmap(cv2.resize(raw, config.input_size[::-1], interpolation=cv2.INTER_LINEAR))


def normalize_heatmap(heatmap: np.ndarray) -> np.ndarray:
    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0, None)
    peak = float(h.max()) if h.size else 0.0
    if not math.isfinite(peak):
        raise NumericError("non-finite CAM values")
    return h / peak if peak > 0 else np.zeros_like(h)


def heatmap_mass_inside(heatmap: np.ndarray, boxes: Sequence[LabeledBox]) -> float:
    """Fraction of the map's total mass inside the union of ``boxes`` (0 for an empty map)."""
    total = float(heatmap.sum())
    if total <= 0:
        return 0.0
    inside = np.zeros(heatmap.shape, bool)
    hgt, wid = heatmap.shape
    for b in boxes:
        x1, y1, x2, y2 = b.box.corners()
        inside[max(0, math.floor(y1)) : min(hgt, math.ceil(y2)), max(0, math.floor(x1)) : min(wid, math.ceil(x2))] = True
    return float(heatmap[inside].sum()) / total


def heatmap_image(heatmap: np.ndarray, overlay_on: np.ndarray | None = None) -> np.ndarray:
    """8-bit grayscale map, or a colour-mapped blend over an RGB image."""
    gray = np.clip(np.rint(normalize_heatmap(heatmap) * 255), 0, 255).astype(np.uint8)
    if overlay_on is None:
        return gray
    base = check_image(overlay_on)
    if base.shape[:2] != gray.shape:
        base, _ = letterbox(base, gray.shape, stride=1)
    colour = cv2.cvtColor(cv2.applyColorMap(gray, cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)
    return cv2.addWeighted(base, 0.5, colour, 0.5, 0)


def save_heatmap(path, heatmap: np.ndarray, overlay_on: np.ndarray | None = None) -> None:
    buf = io.BytesIO()
    Image.fromarray(heatmap_image(heatmap, overlay_on)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


__all__ = [
    "AblationRow",
    "AblationSummary",
    "AblationTable",
    "BISummary",
    "RunRecord",
    "VARIANTS",
    "ablate",
    "bi_record",
    "bi_summary",
    "cam",
    "config_digest",
    "evaluate_model",
    "format_bi_table",
    "format_report_table",
    "heatmap_image",
    "heatmap_mass_inside",
    "normalize_heatmap",
    "report",
    "report_record",
    "run_dir",
    "run_inference",
    "save_heatmap",
    "store_report",
    "write_report",
    "write_run_record",
]
