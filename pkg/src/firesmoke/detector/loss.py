from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from ..atdh import HeadOutput
from ..exceptions import ConfigurationError, NumericError
from .targets import TargetMap

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
EPS = 1e-7


@dataclass
class LossBundle:
    cls_loss: Tensor
    reg_loss: Tensor
    centerness_loss: Tensor

    @property
    def total(self) -> Tensor:
        return self.cls_loss + self.reg_loss + self.centerness_loss

    def as_floats(self) -> tuple[float, float, float, float]:
        return tuple(float(t.detach()) for t in (self.cls_loss, self.reg_loss, self.centerness_loss, self.total))


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> Tensor:
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * ce * (1 - p_t) ** gamma


def iou_loss(pred: Tensor, target: Tensor) -> Tensor:
    """-log IoU of two (l, t, r, b) boxes anchored at the same location."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    iw = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    ih = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = iw * ih
    union = pred_area + target_area - inter
    return -torch.log((inter / union.clamp(min=EPS)).clamp(min=EPS))


def soft_bce(logits: Tensor, targets: Tensor) -> Tensor:
    """Binary cross-entropy minus the target entropy, i.e. Bernoulli KL.

    Same gradient as plain BCE, but zero when the prediction equals a soft
    target instead of bottoming out at the target's entropy.
    """
    t = targets.clamp(EPS, 1 - EPS)
    entropy = -(t * torch.log(t) + (1 - t) * torch.log(1 - t))
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="none") - entropy


def _flatten(outputs: Sequence[HeadOutput], strides: Sequence[int]):
    cls, reg, ctr = [], [], []
    for out, stride in zip(outputs, strides):
        n, k = out.cls_logits.shape[:2]
        cls.append(out.cls_logits.permute(0, 2, 3, 1).reshape(n, -1, k))
        reg.append(out.reg.permute(0, 2, 3, 1).reshape(n, -1, 4) * stride)
        ctr.append(out.centerness.permute(0, 2, 3, 1).reshape(n, -1))
    return torch.cat(cls, 1), torch.cat(reg, 1), torch.cat(ctr, 1)


def stack_targets(targets: Sequence[TargetMap]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cls = np.stack([np.concatenate([lv.cls.reshape(-1) for lv in t.levels]) for t in targets])
    reg = np.stack([np.concatenate([lv.reg.reshape(4, -1).T for lv in t.levels]) for t in targets])
    ctr = np.stack([np.concatenate([lv.centerness.reshape(-1) for lv in t.levels]) for t in targets])
    return cls, reg, ctr


def compute_loss(outputs: Sequence[HeadOutput], targets, strides: Sequence[int]) -> LossBundle:
    """Focal + IoU + centerness losses, each normalised by the positive count (min 1).

    ``outputs`` is one batched ``HeadOutput`` per level; ``targets`` is a list
    of per-image ``TargetMap`` (or the arrays from :func:`stack_targets`).
    """
    if len(outputs) != len(strides):
        raise ConfigurationError(f"{len(outputs)} output levels for {len(strides)} strides")
    for out in outputs:
        for t in out:
            if not torch.isfinite(t).all():
                raise NumericError("non-finite values in head outputs")
    cls_pred, reg_pred, ctr_pred = _flatten(outputs, strides)
    cls_t, reg_t, ctr_t = targets if isinstance(targets, tuple) else stack_targets(targets)
    cls_t = torch.as_tensor(cls_t)
    if cls_t.shape != cls_pred.shape[:2]:
        raise ConfigurationError(f"targets cover {tuple(cls_t.shape)} locations, outputs {tuple(cls_pred.shape[:2])}")
    reg_t = torch.as_tensor(reg_t, dtype=reg_pred.dtype)
    ctr_t = torch.as_tensor(ctr_t, dtype=ctr_pred.dtype)

    pos = cls_t >= 0
    num_pos = max(1, int(pos.sum()))
    onehot = torch.zeros_like(cls_pred)
    onehot[pos, cls_t[pos]] = 1.0
    cls_loss = sigmoid_focal_loss(cls_pred, onehot).sum() / num_pos
    if pos.any():
        reg_loss = iou_loss(reg_pred[pos], reg_t[pos]).sum() / num_pos
        ctr_loss = soft_bce(ctr_pred[pos], ctr_t[pos]).sum() / num_pos
    else:
        reg_loss = (reg_pred * 0).sum()
        ctr_loss = (ctr_pred * 0).sum()
    return LossBundle(cls_loss, reg_loss, ctr_loss)
