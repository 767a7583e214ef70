"""Minimal anchor-free multi-scale detector built around the attentive head."""

from .config import DetectorConfig, TrainConfig
from .loss import LossBundle, compute_loss
from .model import Detector, backbone_forward, fuse_features, load_detector, preprocess, save_detector
from .postprocess import decode, nms, postprocess
from .stats import ModelStats, detector_stats, format_stats, model_stats
from .targets import BACKGROUND, TargetMap, assign_targets
from .train import TrainResult, format_loss_csv, loss_trend, train

__all__ = [
    "BACKGROUND",
    "Detector",
    "DetectorConfig",
    "LossBundle",
    "ModelStats",
    "TargetMap",
    "TrainConfig",
    "TrainResult",
    "assign_targets",
    "backbone_forward",
    "compute_loss",
    "decode",
    "detector_stats",
    "format_loss_csv",
    "format_stats",
    "fuse_features",
    "load_detector",
    "loss_trend",
    "model_stats",
    "nms",
    "postprocess",
    "preprocess",
    "save_detector",
    "train",
]
