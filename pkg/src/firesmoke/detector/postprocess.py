from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np
import torch

from ..atdh import HeadOutput
from ..boxmetrics import CLASSES, BBox, LabeledBox
from ..exceptions import ProtocolError
from .config import DetectorConfig
from .targets import location_grid


def _single(t: torch.Tensor) -> np.ndarray:
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("decode works on one image at a time")
        t = t[0]
    return t.detach().to(torch.float64).cpu().numpy()


def decode(outputs: Sequence[HeadOutput], config: DetectorConfig, image_id: Hashable = None,
           image_size=None) -> list[LabeledBox]:
    """Turn one image's head outputs into scored boxes (before NMS).

    Score is ``sigmoid(class) * sigmoid(centerness)``; only scores at or
    above ``config.score_threshold`` are kept, capped at the
    ``pre_nms_top_k`` best. Boxes are clipped to the image.
    """
    height, width = config.input_size if image_size is None else image_size
    scores_all, boxes_all, labels_all = [], [], []
    for out, stride in zip(outputs, config.pyramid_strides):
        cls = _single(out.cls_logits)
        reg = _single(out.reg) * stride
        ctr = _single(out.centerness)
        k, fh, fw = cls.shape
        xs, ys = location_grid(fh, fw, stride)
        gx, gy = np.meshgrid(xs, ys)
        score = 1.0 / (1.0 + np.exp(-cls)) * (1.0 / (1.0 + np.exp(-ctr)))
        keep = np.argwhere(score >= config.score_threshold)  # (n, 3): class, row, col
        if not len(keep):
            continue
        c, i, j = keep.T
        x1 = np.clip(gx[i, j] - reg[0, i, j], 0, width)
        y1 = np.clip(gy[i, j] - reg[1, i, j], 0, height)
        x2 = np.clip(gx[i, j] + reg[2, i, j], 0, width)
        y2 = np.clip(gy[i, j] + reg[3, i, j], 0, height)
        scores_all.append(score[c, i, j])
        boxes_all.append(np.stack([x1, y1, x2, y2], axis=1))
        labels_all.append(c)
    if not scores_all:
        return []
    scores = np.concatenate(scores_all)
    boxes = np.concatenate(boxes_all)
    labels = np.concatenate(labels_all)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    scores, boxes, labels = scores[valid], boxes[valid], labels[valid]
    order = np.argsort(-scores, kind="stable")[: config.pre_nms_top_k]
    return [
        LabeledBox(BBox.from_corners(*boxes[n]), CLASSES[labels[n]], float(min(1.0, scores[n])), image_id)
        for n in order
    ]


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def nms(dets: Sequence[LabeledBox], iou_threshold: float) -> list[LabeledBox]:
    """Greedy per-class suppression; a box is dropped when a kept, higher-ranked
    box of its class overlaps it with IoU above ``iou_threshold``.

    Ranking is by descending confidence with ties broken by input order. The
    result is in ranked order.
    """
    dets = list(dets)
    if len({d.image_id for d in dets}) > 1:
        raise ProtocolError("nms got detections from several images")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -(dets[i].confidence or 0.0))
    corners = np.array([dets[i].box.corners() for i in order], dtype=np.float64)
    labels = np.array([CLASSES.index(dets[i].category) for i in order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        kept.append(order[r])
        rest = np.arange(r + 1, len(order))
        rest = rest[(labels[rest] == labels[r]) & ~suppressed[rest]]
        if len(rest):
            suppressed[rest[_iou_one_to_many(corners[r], corners[rest]) > iou_threshold]] = True
    return [dets[i] for i in kept]


def postprocess(outputs: Sequence[HeadOutput], config: DetectorConfig, image_id: Hashable = None,
                image_size=None) -> list[LabeledBox]:
    return nms(decode(outputs, config, image_id, image_size), config.nms_iou)[: config.max_detections]
