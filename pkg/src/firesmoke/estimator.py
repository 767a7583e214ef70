"""scikit-learn style wrapper around the detector.

``FireSmokeDetector`` takes flat hyperparameters, so ``get_params`` /
``set_params`` / ``sklearn.base.clone`` work as usual. ``X`` is a list of
uint8 ``(H, W, 3)`` images; ``y`` a list of per-image ``LabeledBox`` lists.
Images of any size are letterboxed to ``input_size`` and predictions are
mapped back to source pixels.
"""

from __future__ import annotations

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .atdh import HeadConfig
from .boxmetrics import BIWeights, LabeledBox, evaluate
from .dataingest.transforms import letterbox
from .detector import DetectorConfig, TrainConfig, load_detector, postprocess, preprocess, save_detector, train
from .validation import check_dataset


class FireSmokeDetector(BaseEstimator):
    def __init__(
        self,
        input_size=(128, 128),
        pyramid_strides=(8, 16, 32),
        backbone_widths=(16, 32, 48, 64),
        head_channels=32,
        attention=True,
        placement="shared",
        rescale_by_channels=True,
        score_threshold=0.05,
        nms_iou=0.6,
        max_detections=100,
        steps=500,
        batch_size=8,
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        warmup_steps=50,
        grad_clip=10.0,
        hflip=True,
        seed=0,
    ):
        self.input_size = input_size
        self.pyramid_strides = pyramid_strides
        self.backbone_widths = backbone_widths
        self.head_channels = head_channels
        self.attention = attention
        self.placement = placement
        self.rescale_by_channels = rescale_by_channels
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.max_detections = max_detections
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.hflip = hflip
        self.seed = seed

    def detector_config(self) -> DetectorConfig:
        strides = tuple(self.pyramid_strides)
        ranges = tuple((0.0 if i == 0 else 8.0 * strides[i - 1], 8.0 * s if i < len(strides) - 1 else float("inf"))
                       for i, s in enumerate(strides))
        return DetectorConfig(
            input_size=tuple(self.input_size),
            pyramid_strides=strides,
            level_ranges=ranges,
            backbone_widths=tuple(self.backbone_widths),
            head=HeadConfig(
                channels=self.head_channels,
                attention_enabled=self.attention,
                rescale_by_channels=self.rescale_by_channels,
                num_levels=len(strides),
                placement=self.placement,
            ),
            score_threshold=self.score_threshold,
            nms_iou=self.nms_iou,
            max_detections=self.max_detections,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, warmup_steps=self.warmup_steps, grad_clip=self.grad_clip,
            hflip=self.hflip,
        )

    def fit(self, X, y):
        images, labels = check_dataset(X, y)
        config = self.detector_config()
        dataset = []
        for image, boxes in zip(images, labels):
            canvas, tf = letterbox(image, config.input_size, config.max_stride)
            dataset.append((canvas, [tf.forward(b) for b in boxes]))
        result = train(dataset, config, seed=self.seed, train_config=self.train_config())
        self.model_ = result.model
        self.config_ = config
        self.loss_trace_ = result.trace
        return self

    def predict(self, X, image_ids=None) -> list[list[LabeledBox]]:
        check_is_fitted(self, "model_")
        images, _ = check_dataset(X)
        ids = list(range(len(images))) if image_ids is None else list(image_ids)
        return [predict_image(self.model_, image, image_id) for image, image_id in zip(images, ids)]

    def score(self, X, y, weights: BIWeights = BIWeights()) -> float:
        """mAP at IoU 0.5 on ``(X, y)``."""
        _, labels = check_dataset(X, y)
        dets = dict(enumerate(self.predict(X)))
        gts = {i: [LabeledBox(b.box, b.category, None, i) for b in boxes] for i, boxes in enumerate(labels)}
        return evaluate(dets, gts, weights=weights).map

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_detector(path, self.model_)

    @classmethod
    def from_checkpoint(cls, path) -> "FireSmokeDetector":
        model = load_detector(path)
        c = model.config
        est = cls(
            input_size=c.input_size, pyramid_strides=c.pyramid_strides, backbone_widths=c.backbone_widths,
            head_channels=c.head.channels, attention=c.head.attention_enabled, placement=c.head.placement,
            rescale_by_channels=c.head.rescale_by_channels, score_threshold=c.score_threshold,
            nms_iou=c.nms_iou, max_detections=c.max_detections,
        )
        est.model_, est.config_, est.loss_trace_ = model, c, []
        return est


@torch.no_grad()
def predict_image(model, image, image_id=None) -> list[LabeledBox]:
    """Letterbox, detect, and map boxes back to ``image`` pixel coordinates."""
    config = model.config
    canvas, tf = letterbox(image, config.input_size, config.max_stride)
    dets = postprocess(model(preprocess([canvas])), config, image_id)
    return [tf.inverse(d) for d in dets]
