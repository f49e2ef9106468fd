"""Warp-then-generate frame synthesis network and its perceptual training loss.

The generator warps ``x_t`` by the backward flow ``f_t`` first, then encodes
the warped frame and the flow in two separate VGG-style streams (up to the
``relu4_1`` stage), fuses them with one convolution and decodes with a
mirrored stack that enlarges feature maps by nearest-neighbour upsampling.
After each upsampling the decoder concatenates the same-scale features of
both streams (U-Net style skips) before its next convolution.  The decoder predicts a correction in logit space on top of the warped frame,
so an untrained generator reproduces the warp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .core import check_flow, check_frame, warp_tensor
from .errors import ConfigurationError, InvalidInputError
from .nn_init import init_module

# probability clamp before taking the logit of the warped frame
_LOGIT_EPS = 1e-3


@dataclass(frozen=True)
class TrunkLayout:
    """Channel widths and number of 3x3 convs in each of the 5 VGG-style stages."""

    widths: tuple[int, ...] = (32, 64, 128, 256, 256)
    convs: tuple[int, ...] = (1, 1, 1, 1, 1)

    def __post_init__(self):
        if len(self.widths) != 5 or len(self.convs) != 5:
            raise ConfigurationError("a trunk layout has exactly 5 stages")
        if min(self.widths) < 1 or min(self.convs) < 1:
            raise ConfigurationError("stage widths and conv counts must be positive")

    @classmethod
    def vgg19(cls) -> "TrunkLayout":
        return cls(widths=(64, 128, 256, 512, 512), convs=(2, 2, 4, 4, 4))

    @classmethod
    def compact(cls) -> "TrunkLayout":
        return cls()


def _trunk(in_channels: int, layout: TrunkLayout, n_stages: int) -> nn.ModuleList:
    """Stage k: [maxpool if k > 1] conv+relu (= relu_k_1) then the stage's remaining convs.

    The remaining convs of stage k are run at the start of stage k+1 so that
    each module's output is exactly the ``relu_k_1`` activation.
    """
    stages = []
    prev = in_channels
    for k in range(n_stages):
        layers: list[nn.Module] = []
        if k > 0:
            for _ in range(layout.convs[k - 1] - 1):
                layers += [nn.Conv2d(prev, prev, 3, 1, 1), nn.ReLU(inplace=True)]
            layers.append(nn.MaxPool2d(2))
        layers += [nn.Conv2d(prev, layout.widths[k], 3, 1, 1), nn.ReLU(inplace=True)]
        prev = layout.widths[k]
        stages.append(nn.Sequential(*layers))
    return nn.ModuleList(stages)


class FeatureExtractor(nn.Module):
    """Frozen stage-wise feature extractor; stage K is downsampled by 2**(K-1).

    The default weights are random with a fixed seed.  Pretrained weights can
    be supplied through :func:`still2video.checkpoint.load_extractor_weights`.
    """

    def __init__(self, layout: TrunkLayout | None = None, n_stages: int = 5, seed: int = 1234):
        super().__init__()
        if not 1 <= n_stages <= 5:
            raise ConfigurationError(f"n_stages must be in 1..5, got {n_stages}")
        self.layout = layout or TrunkLayout.compact()
        self.n_stages = n_stages
        self.seed = seed
        self.stages = _trunk(3, self.layout, n_stages)
        init_module(self, torch.Generator().manual_seed(seed))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor, upto: Optional[int] = None) -> list[torch.Tensor]:
        upto = self.n_stages if upto is None else upto
        feats = []
        for stage in self.stages[:upto]:
            x = stage(x)
            feats.append(x)
        return feats

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)


def extract_features(image, extractor: FeatureExtractor, K: int) -> torch.Tensor:
    """Stage-K features ``(C, H / 2**(K-1), W / 2**(K-1))`` of one ``(H, W, 3)`` image."""
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= extractor.n_stages:
        raise InvalidInputError(f"K must be an integer in 1..{extractor.n_stages}, got {K}")
    img = _image_tensor(image, extractor)
    h, w = img.shape[-2:]
    if h % 2 ** (K - 1) or w % 2 ** (K - 1):
        raise InvalidInputError(f"image {h}x{w} is not divisible by 2**{K - 1}")
    with torch.no_grad():
        return extractor(img, upto=K)[-1][0]


def _image_tensor(image, module: nn.Module) -> torch.Tensor:
    p = next(module.parameters())
    if isinstance(image, torch.Tensor):
        t = image.to(p.dtype)
        return t if t.dim() == 4 else t.permute(2, 0, 1)[None]
    arr = check_frame(image)
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), dtype=p.dtype)[None]


class Flow2Rgb(nn.Module):
    """Two-stream generator: ``(x_t, f_t) -> x_{t+1}``.

    Inputs are ``(N, 3, H, W)`` frames and ``(N, 2, H, W)`` pixel-unit flows;
    the flow stream sees ``flow / max_disp``.  With ``skips`` the decoder also
    receives both streams' features at every scale it passes through.
    """

    def __init__(self, cfg: ModelConfig, layout: TrunkLayout | None = None, seed: int = 0, skips: bool = True):
        super().__init__()
        self.config = cfg
        self.layout = layout or TrunkLayout.compact()
        self.skips = skips
        w = self.layout.widths
        self.frame_stream = _trunk(3, self.layout, 4)
        self.flow_stream = _trunk(2, self.layout, 4)
        self.fuse = nn.Sequential(nn.Conv2d(2 * w[3], w[3], 3, 1, 1), nn.ReLU(inplace=True))
        up, merge = [], []
        for k in (3, 2, 1):
            layers: list[nn.Module] = []
            for _ in range(self.layout.convs[k] - 1):
                layers += [nn.Conv2d(w[k], w[k], 3, 1, 1), nn.ReLU(inplace=True)]
            layers += [
                nn.Conv2d(w[k], w[k - 1], 3, 1, 1),
                nn.ReLU(inplace=True),
                nn.Upsample(scale_factor=2, mode="nearest"),
            ]
            up.append(nn.Sequential(*layers))
            in_ch = 3 * w[k - 1] if skips else w[k - 1]
            tail: list[nn.Module] = [nn.Conv2d(in_ch, w[k - 1], 3, 1, 1), nn.ReLU(inplace=True)]
            if k == 1:
                for _ in range(self.layout.convs[0] - 1):
                    tail += [nn.Conv2d(w[0], w[0], 3, 1, 1), nn.ReLU(inplace=True)]
            merge.append(nn.Sequential(*tail))
        self.up = nn.ModuleList(up)
        self.merge = nn.ModuleList(merge)
        self.output = nn.Conv2d(w[0], 3, 3, 1, 1)
        init_module(self, torch.Generator().manual_seed(seed))
        with torch.no_grad():
            self.output.weight.zero_()
            self.output.bias.zero_()
        # instrumentation: called with the warped intermediate when set
        self.warp_hook: Optional[Callable[[torch.Tensor], None]] = None

    def _check(self, frame: torch.Tensor, flow: torch.Tensor) -> None:
        c = self.config
        if frame.dim() != 4 or tuple(frame.shape[1:]) != (3, c.height, c.width):
            raise ConfigurationError(f"frame {tuple(frame.shape)} does not match (N, 3, {c.height}, {c.width})")
        if flow.dim() != 4 or tuple(flow.shape[1:]) != (2, c.height, c.width):
            raise ConfigurationError(f"flow {tuple(flow.shape)} does not match (N, 2, {c.height}, {c.width})")

    def forward(self, frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        self._check(frame, flow)
        warped = warp_tensor(frame, flow)
        if self.warp_hook is not None:
            self.warp_hook(warped)
        a, b = warped, flow / self.config.max_disp
        feats = []
        for sa, sb in zip(self.frame_stream, self.flow_stream):
            a, b = sa(a), sb(b)
            feats.append((a, b))
        x = self.fuse(torch.cat([a, b], dim=1))
        for up, merge, (fa, fb) in zip(self.up, self.merge, reversed(feats[:3])):
            x = up(x)
            x = merge(torch.cat([x, fa, fb], dim=1) if self.skips else x)
        base = torch.logit(warped.clamp(_LOGIT_EPS, 1 - _LOGIT_EPS))
        return torch.sigmoid(base + self.output(x))


def generate_next_frame(x_t, f_t, model: Flow2Rgb) -> np.ndarray:
    """Synthesize ``x_{t+1}`` from an ``(H, W, 3)`` frame and ``(H, W, 2)`` flow."""
    frame = check_frame(x_t, "x_t")
    flow = check_flow(f_t, "f_t")
    p = next(model.parameters())
    ft = torch.as_tensor(np.ascontiguousarray(frame.transpose(2, 0, 1)), dtype=p.dtype)[None]
    fl = torch.as_tensor(np.ascontiguousarray(flow.transpose(2, 0, 1)), dtype=p.dtype)[None]
    with torch.no_grad():
        out = model(ft, fl)
    return out[0].permute(1, 2, 0).double().numpy().copy()


class FrameLoss(NamedTuple):
    total: torch.Tensor
    pixel: torch.Tensor
    feature: torch.Tensor


def loss_flow2rgb(pred, target, extractor: FeatureExtractor, lam: float = 1e-2) -> FrameLoss:
    """Mean squared pixel error plus ``lam`` times the summed per-stage feature MSE.

    ``pred``/``target`` may be ``(H, W, 3)`` arrays or ``(N, 3, H, W)`` tensors;
    gradients flow through tensor inputs.
    """
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    p = _image_tensor(pred, extractor)
    t = _image_tensor(target, extractor)
    if p.shape != t.shape:
        raise InvalidInputError(f"pred {tuple(p.shape)} and target {tuple(t.shape)} differ")
    pixel = ((p - t) ** 2).mean()
    feature = p.new_zeros(())
    for fp, ft in zip(extractor(p), extractor(t)):
        feature = feature + ((fp - ft) ** 2).mean()
    return FrameLoss(pixel + lam * feature, pixel, feature)
