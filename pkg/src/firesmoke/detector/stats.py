from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn


@dataclass
class ModelStats:
    param_count: int
    mult_adds: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def params_millions(self) -> float:
        return self.param_count / 1e6

    def gmacs(self, size: tuple[int, int]) -> float:
        return self.mult_adds[tuple(size)] / 1e9


def count_parameters(model: nn.Module) -> int:
    return sum(int(v.numel()) for v in model.state_dict().values() if v.is_floating_point())


def conv_mult_adds(model: nn.Module, input_size: tuple[int, int], in_channels: int | None = None) -> int:
    """Multiply-adds of every Conv2d for one image: out elements x (C_in / groups) x k_h x k_w."""
    convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        return 0
    if in_channels is None:
        in_channels = convs[0].in_channels
    total = 0

    def hook(module, inputs, output):
        nonlocal total
        kh, kw = module.kernel_size
        total += output[0].numel() * (module.in_channels // module.groups) * kh * kw

    handles = [m.register_forward_hook(hook) for m in convs]
    try:
        with torch.no_grad():
            model(torch.zeros(1, in_channels, *input_size))
    finally:
        for h in handles:
            h.remove()
    return total


def model_stats(model: nn.Module, input_sizes: Sequence[tuple[int, int]] = ()) -> ModelStats:
    return ModelStats(
        count_parameters(model),
        {tuple(size): conv_mult_adds(model, tuple(size)) for size in input_sizes},
    )


def detector_stats(config, input_sizes: Sequence[tuple[int, int]] = ()) -> ModelStats:
    """Stats of a freshly built detector; every size must be divisible by the largest stride."""
    from .model import Detector

    for h, w in input_sizes:
        config.check_input_size(h, w)
    return model_stats(Detector(config), input_sizes)


def format_stats(stats: ModelStats) -> str:
    lines = [f"parameters  {stats.param_count}  ({stats.params_millions:.4f} M)"]
    for (h, w), macs in stats.mult_adds.items():
        lines.append(f"mult-adds {h}x{w}  {macs}  ({macs / 1e9:.4f} G)")
    return "\n".join(lines) + "\n"
