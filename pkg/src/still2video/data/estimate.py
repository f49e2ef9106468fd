"""Backward optical flow estimators.

Three strategies share one call signature ``est(x_t, x_t1, step) -> flow``:

* :class:`CoarseToFineEstimator` - pyramidal Lucas-Kanade with iterative
  warping (3 levels, 5x5 least-squares windows by default).
* :class:`ImportedFlowEstimator` - returns precomputed ``.flo`` files.
* :class:`GroundTruthEstimator` - returns known flows (synthetic clips).
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from ..core import backward_warp, check_frame
from ..errors import EstimationError, InvalidInputError
from .flo import read_flo


class FlowEstimator(Protocol):
    name: str

    def __call__(self, x_t: np.ndarray, x_t1: np.ndarray, step: int = 0) -> np.ndarray: ...


def _resize_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = flow.shape[:2]
    t = torch.from_numpy(np.ascontiguousarray(flow.transpose(2, 0, 1)))[None]
    up = F.interpolate(t, size=shape, mode="bilinear", align_corners=True)[0].numpy()
    up[0] *= (shape[1] - 1) / max(w - 1, 1)
    up[1] *= (shape[0] - 1) / max(h - 1, 1)
    return up.transpose(1, 2, 0)


def _downsample(img: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0), mode="nearest")
    return blurred[::2, ::2]


class CoarseToFineEstimator:
    """Pyramidal iterative Lucas-Kanade on RGB frames.

    Flows in textureless windows are pulled toward zero by a Tikhonov term
    added to the 2x2 structure tensor.
    """

    name = "builtin_coarse_to_fine"

    def __init__(
        self,
        levels: int = 3,
        window: int = 5,
        iterations: int = 6,
        regularization: float = 1e-4,
        presmooth: float = 0.7,
    ):
        if levels < 1 or window < 1 or iterations < 1:
            raise InvalidInputError("levels, window and iterations must be positive")
        self.levels = levels
        self.window = window
        self.iterations = iterations
        self.regularization = regularization
        self.presmooth = presmooth

    def _refine(self, src: np.ndarray, dst: np.ndarray, flow: np.ndarray) -> np.ndarray:
        dst_gy, dst_gx = np.gradient(dst, axis=(0, 1))
        h, w = dst.shape[:2]
        gy0, gx0 = np.mgrid[0:h, 0:w]
        for _ in range(self.iterations):
            warped = backward_warp(src, flow)
            gy, gx = np.gradient(warped, axis=(0, 1))
            ix = 0.5 * (gx + dst_gx)
            iy = 0.5 * (gy + dst_gy)
            it = warped - dst
            # samples clamped at the border carry no information about the flow
            sx, sy = gx0 + flow[..., 0], gy0 + flow[..., 1]
            valid = ((sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)).astype(np.float64)[..., None]

            def wsum(a):
                return ndimage.uniform_filter((a * valid).sum(axis=2), size=self.window, mode="nearest")

            a11 = wsum(ix * ix) + self.regularization
            a12 = wsum(ix * iy)
            a22 = wsum(iy * iy) + self.regularization
            b1 = -wsum(ix * it)
            b2 = -wsum(iy * it)
            det = a11 * a22 - a12 * a12
            du = (a22 * b1 - a12 * b2) / det
            dv = (a11 * b2 - a12 * b1) / det
            flow = flow + np.stack([du, dv], -1)
            flow = np.stack([ndimage.median_filter(flow[..., c], size=3, mode="nearest") for c in range(2)], -1)
        return flow

    def __call__(self, x_t: np.ndarray, x_t1: np.ndarray, step: int = 0) -> np.ndarray:
        src = np.asarray(x_t, dtype=np.float64)
        dst = np.asarray(x_t1, dtype=np.float64)
        if self.presmooth > 0:
            src = ndimage.gaussian_filter(src, sigma=(self.presmooth, self.presmooth, 0), mode="nearest")
            dst = ndimage.gaussian_filter(dst, sigma=(self.presmooth, self.presmooth, 0), mode="nearest")
        pyramid = [(src, dst)]
        for _ in range(self.levels - 1):
            s, d = pyramid[-1]
            if min(s.shape[:2]) < 2 * self.window:
                break
            pyramid.append((_downsample(s), _downsample(d)))
        flow = np.zeros(pyramid[-1][0].shape[:2] + (2,))
        for level in range(len(pyramid) - 1, -1, -1):
            s, d = pyramid[level]
            if flow.shape[:2] != s.shape[:2]:
                flow = _resize_flow(flow, s.shape[:2])
            flow = self._refine(s, d, flow)
        return flow


class ImportedFlowEstimator:
    """Serve flows from ``.flo`` files; ``step`` indexes the file list."""

    name = "imported_files"

    def __init__(self, paths: Sequence[str | Path]):
        self.paths = [Path(p) for p in paths]

    @classmethod
    def from_directory(cls, directory: str | Path) -> "ImportedFlowEstimator":
        paths = sorted(Path(directory).glob("*.flo"))
        if not paths:
            raise EstimationError(f"no .flo files in {directory}")
        return cls(paths)

    def __call__(self, x_t: np.ndarray, x_t1: np.ndarray, step: int = 0) -> np.ndarray:
        if not 0 <= step < len(self.paths):
            raise EstimationError(f"no imported flow for step {step}")
        return read_flo(self.paths[step])


class GroundTruthEstimator:
    name = "synthetic_ground_truth"

    def __init__(self, flows: np.ndarray):
        self.flows = np.asarray(flows)

    def __call__(self, x_t: np.ndarray, x_t1: np.ndarray, step: int = 0) -> np.ndarray:
        if not 0 <= step < len(self.flows):
            raise EstimationError(f"no ground-truth flow for step {step}")
        return self.flows[step]


ESTIMATORS = {
    CoarseToFineEstimator.name: CoarseToFineEstimator,
    ImportedFlowEstimator.name: ImportedFlowEstimator,
    GroundTruthEstimator.name: GroundTruthEstimator,
}


def estimate_backward_flow(x_t, x_t1, est: FlowEstimator, step: int = 0) -> np.ndarray:
    """Flow ``f`` such that ``backward_warp(x_t, f)`` approximates ``x_t1``."""
    a = check_frame(x_t, "x_t")
    b = check_frame(x_t1, "x_t1")
    if a.shape != b.shape:
        raise InvalidInputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    try:
        flow = np.asarray(est(a, b, step))
    except (EstimationError, InvalidInputError):
        raise
    except Exception as exc:  # estimator plugins may fail arbitrarily
        raise EstimationError(f"{getattr(est, 'name', est)} failed: {exc}") from exc
    if flow.shape != a.shape[:2] + (2,):
        raise EstimationError(f"estimator returned flow of shape {flow.shape}, expected {a.shape[:2] + (2,)}")
    if not np.all(np.isfinite(flow)):
        raise EstimationError("estimator returned non-finite flow")
    return flow


def estimate_clip_flows(frames: Sequence[np.ndarray], est: FlowEstimator) -> np.ndarray:
    """Backward flows between each adjacent pair, ``(T-1, H, W, 2)``."""
    if len(frames) < 2:
        raise InvalidInputError("need at least two frames to estimate flow")
    return np.stack([estimate_backward_flow(frames[t], frames[t + 1], est, step=t) for t in range(len(frames) - 1)])
