"""Frames, flows, flow normalization and backward warping.

Conventions used throughout the package:

* A frame is a float array of shape ``(H, W, 3)`` with values in ``[0, 1]``.
* A flow field is a float array of shape ``(H, W, 2)`` holding the
  ``(u, v)`` = (horizontal, vertical) displacement in pixels.  Flows are
  *backward*: the vector stored at pixel ``p`` of frame ``t+1`` points to the
  location ``p + (u, v)`` in frame ``t`` that it is sampled from.
* A flow volume is an array ``(M, H, W, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError

# max displacement (px) used for normalization at 128x128; scaled with resolution
DEFAULT_MAX_DISP_128 = 10.0


def default_max_disp(height: int) -> float:
    return DEFAULT_MAX_DISP_128 * height / 128.0


@dataclass(frozen=True)
class NormalizedFlow:
    """A flow field affinely mapped into ``[0, 1]``.

    ``values`` has the same ``(H, W, 2)`` layout as a pixel-unit flow and
    ``max_disp`` is the scale that was used for the mapping.
    """

    values: np.ndarray
    max_disp: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def check_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InvalidInputError(f"{name} must have shape (H, W, 3), got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return frame


def check_flow(flow: np.ndarray, name: str = "flow") -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise InvalidInputError(f"{name} must have shape (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return flow


def normalize_flow(flow: np.ndarray, max_disp: float) -> NormalizedFlow:
    """Map pixel displacements ``d`` to ``clip(d / (2 * max_disp) + 0.5, 0, 1)``."""
    if not max_disp > 0:
        raise InvalidInputError(f"max_disp must be positive, got {max_disp}")
    flow = check_flow(flow)
    values = np.clip(flow / (2.0 * max_disp) + 0.5, 0.0, 1.0)
    return NormalizedFlow(values=values, max_disp=float(max_disp))


def denormalize_flow(nflow: NormalizedFlow) -> np.ndarray:
    values = np.asarray(nflow.values)
    if not nflow.max_disp > 0:
        raise InvalidInputError("normalized flow carries a non-positive max_disp")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise InvalidInputError("normalized flow values must lie in [0, 1]")
    return (values - 0.5) * 2.0 * nflow.max_disp


def warp_tensor(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp a batch ``(N, C, H, W)`` with flows ``(N, 2, H, W)``.

    Sample positions are clamped to the image border, so the output is always
    a convex combination of input pixels.  Differentiable in both arguments.
    """
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise InvalidInputError(
            f"expected image (N,C,H,W) and flow (N,2,H,W), got {tuple(image.shape)} "
            f"and {tuple(flow.shape)}"
        )
    n, c, h, w = image.shape
    if flow.shape[0] != n or flow.shape[2:] != image.shape[2:]:
        raise InvalidInputError(
            f"flow {tuple(flow.shape)} does not match image {tuple(image.shape)}"
        )
    flow = flow.to(image.dtype)
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=image.dtype, device=image.device),
        torch.arange(w, dtype=image.dtype, device=image.device),
        indexing="ij",
    )
    x = (gx + flow[:, 0]).clamp(0, w - 1)
    y = (gy + flow[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(n, c, h * w)

    def gather(yy: torch.Tensor, xx: torch.Tensor) -> torch.Tensor:
        idx = (yy * w + xx).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    top = (1 - wx) * gather(y0, x0) + wx * gather(y0, x1)
    bottom = (1 - wx) * gather(y1, x0) + wx * gather(y1, x1)
    return (1 - wy) * top + wy * bottom


def backward_warp(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``frame`` at ``(y + v, x + u)`` for every destination pixel.

    Accepts any number of channels; returns an array of the frame's dtype.
    """
    frame = np.asarray(frame)
    flow = check_flow(flow)
    if frame.ndim != 3 or frame.shape[:2] != flow.shape[:2]:
        raise InvalidInputError(
            f"frame {frame.shape} and flow {flow.shape} dimensions do not match"
        )
    dtype = frame.dtype if np.issubdtype(frame.dtype, np.floating) else np.float64
    img = torch.from_numpy(np.ascontiguousarray(frame, dtype=dtype)).permute(2, 0, 1)[None]
    fl = torch.from_numpy(np.ascontiguousarray(flow, dtype=dtype)).permute(2, 0, 1)[None]
    with torch.no_grad():
        out = warp_tensor(img, fl)
    return out[0].permute(1, 2, 0).numpy().copy()


def stack_condition(x0: np.ndarray, nflows: Sequence[NormalizedFlow]) -> np.ndarray:
    """Build the ``(M, 5, H, W)`` encoder input: channels ``(u, v, R, G, B)``."""
    x0 = check_frame(x0, "x0")
    if len(nflows) == 0:
        raise InvalidInputError("at least one flow is required")
    h, w = x0.shape[:2]
    cube = np.empty((len(nflows), 5, h, w), dtype=np.float64)
    rgb = np.transpose(x0, (2, 0, 1))
    for t, nf in enumerate(nflows):
        values = np.asarray(nf.values)
        if values.shape != (h, w, 2):
            raise InvalidInputError(
                f"flow {t} has shape {values.shape}, expected {(h, w, 2)}"
            )
        cube[t, 0:2] = np.transpose(values, (2, 0, 1))
        cube[t, 2:5] = rgb
    return cube


def normalize_volume(flows: np.ndarray, max_disp: float) -> list[NormalizedFlow]:
    return [normalize_flow(f, max_disp) for f in np.asarray(flows)]


@dataclass
class VideoClip:
    """Ordered frames ``(T, H, W, 3)`` with optional frame rate metadata."""

    frames: np.ndarray
    frame_rate: float | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise InvalidInputError(f"clip frames must be (T, H, W, 3), got {frames.shape}")
        if self.frame_rate is not None and not self.frame_rate > 0:
            raise InvalidInputError("frame_rate must be positive")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]
