"""Attentive transparency detection head.

A four-layer 3x3 conv tower feeds a parameter-free channel attention block:
spatial average and max pooling give two per-channel descriptors, their sum
is softmax-normalised across channels, the tower output is reweighted by the
scores and added back to itself through a shortcut. Three 3x3 projections
then give class logits, (l, t, r, b) distances and centerness.

Tensors follow the torch ``(..., C, H, W)`` layout; a leading batch
dimension is optional everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple

import torch
from torch import Tensor, nn

from .exceptions import ConfigurationError
from .validation import check_feature_map

PLACEMENTS = ("shared", "per_branch")
PRIOR_PROB = 0.01
REG_LOG_CLAMP = 12.0


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 64
    num_classes: int = 2
    tower_depth: int = 4
    attention_enabled: bool = True
    rescale_by_channels: bool = True
    in_channels: int | None = None
    num_levels: int = 3
    placement: str = "shared"

    def __post_init__(self):
        if self.channels < 1 or self.num_classes < 1 or self.tower_depth < 1 or self.num_levels < 1:
            raise ConfigurationError(f"head sizes must be positive: {self}")
        if self.in_channels is not None and self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be positive, got {self.in_channels}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")

    @property
    def input_channels(self) -> int:
        return self.channels if self.in_channels is None else self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)


class HeadOutput(NamedTuple):
    cls_logits: Tensor
    reg: Tensor
    centerness: Tensor


def group_count(channels: int) -> int:
    return math.gcd(channels, 8)


# -- attention block, as pure functions ---------------------------------------

def channel_descriptors(fmap: Tensor) -> tuple[Tensor, Tensor]:
    """Spatial mean and max of every channel."""
    flat = fmap.flatten(-2)
    return flat.mean(-1), flat.amax(-1)


def fuse_and_normalize(gap: Tensor, mp: Tensor) -> Tensor:
    if gap.shape != mp.shape:
        raise ConfigurationError(f"descriptor shapes differ: {tuple(gap.shape)} vs {tuple(mp.shape)}")
    # torch.softmax subtracts the running max internally
    return torch.softmax(gap + mp, dim=-1)


def apply_attention(fmap: Tensor, scores: Tensor, rescale_by_channels: bool = True) -> Tensor:
    channels = fmap.shape[-3]
    if scores.shape[-1] != channels or scores.shape[:-1] != fmap.shape[:-3]:
        raise ConfigurationError(
            f"{scores.shape[-1]} scores for a feature map with {channels} channels"
        )
    weights = scores * channels if rescale_by_channels else scores
    return fmap * weights[..., None, None]


def shortcut_merge(original: Tensor, attended: Tensor) -> Tensor:
    if original.shape != attended.shape:
        raise ConfigurationError(f"shortcut shapes differ: {tuple(original.shape)} vs {tuple(attended.shape)}")
    return original + attended


def attention_scores(fmap: Tensor) -> Tensor:
    return fuse_and_normalize(*channel_descriptors(fmap))


class TransparencyAttention(nn.Module):
    """Channel reweighting with shortcut; disabled means identity reweighting."""

    def __init__(self, enabled: bool = True, rescale_by_channels: bool = True):
        super().__init__()
        self.enabled = enabled
        self.rescale_by_channels = rescale_by_channels

    def forward(self, x: Tensor) -> Tensor:
        if self.enabled:
            attended = apply_attention(x, attention_scores(x), self.rescale_by_channels)
        else:
            attended = x
        return shortcut_merge(x, attended)


# -- modules -------------------------------------------------------------------

class ConvGNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.GroupNorm(group_count(cout), cout),
            nn.ReLU(inplace=False),
        )


class ConvTower(nn.Sequential):
    def __init__(self, in_channels: int, channels: int, depth: int = 4):
        layers = [ConvGNReLU(in_channels if i == 0 else channels, channels) for i in range(depth)]
        super().__init__(*layers)


class Scale(nn.Module):
    def __init__(self, init_value: float = 1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor([float(init_value)]))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale


class ATDHead(nn.Module):
    """Detection head shared across pyramid levels.

    With ``placement="shared"`` one tower and one attention block feed all
    three projections. ``"per_branch"`` gives classification and regression
    their own tower and attention block; centerness rides on the regression
    branch.
    """

    def __init__(self, config: HeadConfig = HeadConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        self.tower = ConvTower(config.input_channels, c, config.tower_depth)
        self.attention = TransparencyAttention(config.attention_enabled, config.rescale_by_channels)
        if config.placement == "per_branch":
            self.reg_tower = ConvTower(config.input_channels, c, config.tower_depth)
            self.reg_attention = TransparencyAttention(config.attention_enabled, config.rescale_by_channels)
        self.cls_out = nn.Conv2d(c, config.num_classes, 3, padding=1)
        self.reg_out = nn.Conv2d(c, 4, 3, padding=1)
        self.ctr_out = nn.Conv2d(c, 1, 3, padding=1)
        self.scales = nn.ModuleList(Scale(1.0) for _ in range(config.num_levels))
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for conv in (self.cls_out, self.reg_out, self.ctr_out):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Post-attention maps feeding the (classification, regression) projections."""
        cls_feat = self.attention(self.tower(x))
        if self.config.placement == "per_branch":
            return cls_feat, self.reg_attention(self.reg_tower(x))
        return cls_feat, cls_feat

    def project(self, cls_feat: Tensor, reg_feat: Tensor, level: int = 0) -> HeadOutput:
        if not 0 <= level < len(self.scales):
            raise ConfigurationError(f"level {level} outside 0..{len(self.scales) - 1}")
        reg = torch.exp(self.scales[level](self.reg_out(reg_feat)).clamp(max=REG_LOG_CLAMP))
        return HeadOutput(self.cls_out(cls_feat), reg, self.ctr_out(reg_feat))

    def forward_level(self, x: Tensor, level: int = 0) -> HeadOutput:
        if x.shape[-3] != self.config.input_channels:
            raise ConfigurationError(
                f"head expects {self.config.input_channels} input channels, got {x.shape[-3]}"
            )
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = self.project(*self.features(x), level=level)
        if squeeze:
            out = HeadOutput(*(t.squeeze(0) for t in out))
        return out

    def forward(self, features: list[Tensor]) -> list[HeadOutput]:
        return [self.forward_level(f, level) for level, f in enumerate(features)]


# -- functional surface over named parameter arrays ----------------------------

def _as_tensor_params(params: Mapping[str, object]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else torch.as_tensor(v) for k, v in params.items()}


def _validate_params(module: nn.Module, params: Mapping[str, Tensor], what: str) -> None:
    expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
    given = {k: tuple(v.shape) for k, v in params.items()}
    missing = sorted(set(expected) - set(given))
    extra = sorted(set(given) - set(expected))
    if missing or extra:
        raise ConfigurationError(f"{what} parameters do not match config: missing {missing[:4]}, unexpected {extra[:4]}")
    bad = [k for k in expected if expected[k] != given[k]]
    if bad:
        k = bad[0]
        raise ConfigurationError(f"{what} parameter {k!r} has shape {given[k]}, config implies {expected[k]}")


def _tower_depth_in(params: Mapping[str, Tensor]) -> int:
    return len({k.split(".")[0] for k in params})


def conv_tower(fmap: Tensor, config: HeadConfig, params: Mapping[str, object]) -> Tensor:
    """Run the conv tower with explicit parameters (``ConvTower`` state-dict names)."""
    params = _as_tensor_params(params)
    check_feature_map(fmap)
    depth = _tower_depth_in(params)
    if depth != config.tower_depth:
        raise ConfigurationError(f"params hold {depth} tower layers, config says {config.tower_depth}")
    first = params.get("0.0.weight")
    if first is None or first.shape[1] != fmap.shape[-3]:
        got = None if first is None else first.shape[1]
        raise ConfigurationError(f"tower expects {got} input channels, feature map has {fmap.shape[-3]}")
    module = ConvTower(fmap.shape[-3], config.channels, config.tower_depth).to(fmap.dtype)
    _validate_params(module, params, "tower")
    x = fmap.unsqueeze(0) if fmap.dim() == 3 else fmap
    out = torch.func.functional_call(module, params, (x,))
    return out.squeeze(0) if fmap.dim() == 3 else out


def init_head_params(config: HeadConfig, seed: int = 0, dtype=torch.float32) -> dict[str, Tensor]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ATDHead(config).to(dtype)
    return {k: v.detach().clone() for k, v in head.state_dict().items()}


class _LevelCall(nn.Module):
    def __init__(self, head: ATDHead, level: int):
        super().__init__()
        self.head = head
        self.level = level

    def forward(self, x: Tensor) -> HeadOutput:
        return self.head.forward_level(x, self.level)


def head_forward(fmap: Tensor, config: HeadConfig, params: Mapping[str, object], level: int = 0) -> HeadOutput:
    """Full head on one feature map using explicit named parameters."""
    params = _as_tensor_params(params)
    check_feature_map(fmap)
    module = ATDHead(config).to(fmap.dtype)
    _validate_params(module, params, "head")
    named = {f"head.{k}": v for k, v in params.items()}
    return torch.func.functional_call(_LevelCall(module, level), named, (fmap,))
