"""Seeded fan-in uniform initialization for conv layers."""

from __future__ import annotations

import math

import torch
from torch import nn

_CONV = (nn.Conv2d, nn.Conv3d)
_TCONV = (nn.ConvTranspose2d, nn.ConvTranspose3d)
_NORM = (nn.BatchNorm2d, nn.BatchNorm3d)


def fan_in(layer: nn.Module) -> float:
    k = math.prod(layer.kernel_size)
    if isinstance(layer, _TCONV):
        # each output sees in_channels * k / prod(stride) inputs on average
        return layer.in_channels * k / math.prod(layer.stride)
    return layer.in_channels * k


@torch.no_grad()
def init_module(module: nn.Module, generator: torch.Generator, gain: float = math.sqrt(2.0)) -> None:
    """Uniform(-b, b) weights with ``b = gain * sqrt(3 / fan_in)``, zero biases."""
    for layer in module.modules():
        if isinstance(layer, _CONV + _TCONV):
            bound = gain * math.sqrt(3.0 / fan_in(layer))
            w = torch.empty(layer.weight.shape, dtype=torch.float64)
            w.uniform_(-bound, bound, generator=generator)
            layer.weight.copy_(w)
            if layer.bias is not None:
                layer.bias.zero_()
        elif isinstance(layer, _NORM):
            layer.reset_running_stats()
            layer.weight.fill_(1.0)
            layer.bias.zero_()
