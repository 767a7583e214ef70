"""Deterministic single-device training.

Every random draw (initialisation, shuffling, flips) comes from a sub-seed
of the one ``seed`` argument, so identical inputs give bit-identical loss
traces and weights on a given machine.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..boxmetrics import BBox, LabeledBox
from ..exceptions import ConfigurationError, TrainingDivergedError
from ..seeding import derive_seed
from ..validation import check_annotations, check_image
from .config import DetectorConfig, TrainConfig
from .loss import compute_loss, stack_targets
from .model import Detector, preprocess
from .targets import assign_targets

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "cls", "reg", "ctr", "total")


@dataclass
class TrainResult:
    model: Detector
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def loss_csv(self) -> str:
        return format_loss_csv(self.trace)


def format_loss_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for step, *values in trace:
        writer.writerow([step, *(repr(float(v)) for v in values)])
    return buf.getvalue()


def loss_trend(trace, fraction: float = 0.1) -> tuple[float, float]:
    """Mean total loss over the first and the last ``fraction`` of steps."""
    if not trace:
        raise ConfigurationError("empty loss trace")
    k = max(1, int(len(trace) * fraction))
    totals = [r[4] for r in trace]
    return math.fsum(totals[:k]) / k, math.fsum(totals[-k:]) / k


def hflip(image: np.ndarray, boxes: Sequence[LabeledBox]) -> tuple[np.ndarray, list[LabeledBox]]:
    width = image.shape[1]
    flipped = [
        LabeledBox(BBox(width - b.box.cx, b.box.cy, b.box.w, b.box.h), b.category, b.confidence, b.image_id)
        for b in boxes
    ]
    return np.ascontiguousarray(image[:, ::-1]), flipped


def build_model(config: DetectorConfig, seed: int) -> Detector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init") % 2**63)
        return Detector(config)


def _lr_at(step: int, tc: TrainConfig) -> float:
    if tc.warmup_steps and step < tc.warmup_steps:
        return tc.lr * (0.1 + 0.9 * step / tc.warmup_steps)
    progress = (step - tc.warmup_steps) / max(1, tc.steps - tc.warmup_steps)
    return tc.lr * 0.5 * (1 + math.cos(math.pi * progress))


def train(dataset: Sequence[tuple[np.ndarray, Sequence[LabeledBox]]], config: DetectorConfig,
          seed: int = 0, train_config: TrainConfig = TrainConfig(),
          on_step: Callable[[int, tuple], None] | None = None) -> TrainResult:
    """SGD with momentum on ``(image, boxes)`` pairs already at ``config.input_size``."""
    if not len(dataset):
        raise ConfigurationError("training set is empty")
    images, annotations = [], []
    for i, (image, boxes) in enumerate(dataset):
        image = check_image(image, f"dataset[{i}]")
        if image.shape[:2] != tuple(config.input_size):
            raise ConfigurationError(
                f"dataset[{i}] is {image.shape[0]}x{image.shape[1]}, expected {config.input_size}; letterbox it first"
            )
        images.append(image)
        annotations.append(check_annotations(boxes))

    # targets for both flip states, computed once
    plain = [assign_targets(a, config) for a in annotations]
    flipped_data = [hflip(im, a) for im, a in zip(images, annotations)]
    flipped = [assign_targets(a, config) for _, a in flipped_data] if train_config.hflip else None

    model = build_model(config, seed).train()
    params = [p for p in model.parameters() if p.requires_grad]
    decay = [p for p in params if p.dim() > 1]
    no_decay = [p for p in params if p.dim() <= 1]
    optimizer = torch.optim.SGD(
        [{"params": decay, "weight_decay": train_config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=train_config.lr, momentum=train_config.momentum,
    )
    order_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    flip_rng = np.random.default_rng(derive_seed(seed, "augment"))

    n = len(images)
    queue: list[int] = []
    result = TrainResult(model)
    for step in range(train_config.steps):
        batch = []
        while len(batch) < min(train_config.batch_size, n):
            if not queue:
                queue = order_rng.permutation(n).tolist()
            batch.append(queue.pop(0))
        flips = flip_rng.random(len(batch)) < 0.5 if train_config.hflip else np.zeros(len(batch), bool)
        batch_images = [flipped_data[i][0] if f else images[i] for i, f in zip(batch, flips)]
        batch_targets = [flipped[i] if f else plain[i] for i, f in zip(batch, flips)]

        for group in optimizer.param_groups:
            group["lr"] = _lr_at(step, train_config)
        outputs = model(preprocess(batch_images))
        losses = compute_loss(outputs, stack_targets(batch_targets), config.pyramid_strides)
        total = losses.total
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: cls={float(losses.cls_loss)}, reg={float(losses.reg_loss)}, "
                f"ctr={float(losses.centerness_loss)}"
            )
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if train_config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, train_config.grad_clip)
        optimizer.step()

        record = (step, *losses.as_floats())
        result.trace.append(record)
        if on_step is not None:
            on_step(step, record)
        if step % 50 == 0 or step == train_config.steps - 1:
            logger.info("step %d total %.4f (cls %.4f reg %.4f ctr %.4f)", step, record[4], *record[1:4])
    model.eval()
    return result
