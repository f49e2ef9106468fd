"""Video ingestion, synthetic clips, flow estimation and flow file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from ..errors import InvalidInputError
from .estimate import (
    CoarseToFineEstimator,
    FlowEstimator,
    GroundTruthEstimator,
    ImportedFlowEstimator,
    estimate_backward_flow,
    estimate_clip_flows,
)
from .flo import read_flo, write_flo
from .ingest import DatasetSpec, ingest_video, load_flows, split_videos, write_video
from .synthetic import SyntheticClip, SyntheticClipSpec, make_synthetic


@dataclass
class FlowClip:
    """Frames ``(T, H, W, 3)`` with the ``T - 1`` backward flows between them."""

    frames: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        if len(self.flows) != len(self.frames) - 1:
            raise InvalidInputError(
                f"{len(self.frames)} frames need {len(self.frames) - 1} flows, got {len(self.flows)}"
            )

    @classmethod
    def from_synthetic(cls, s: SyntheticClip) -> "FlowClip":
        return cls(s.clip.frames, s.gt_flows)


def _rescale_flows(flows: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize ``(T, h, w, 2)`` flows and rescale them to the new pixel units."""
    if flows.shape[1:3] == (height, width):
        return flows
    h, w = flows.shape[1:3]
    t = torch.from_numpy(np.ascontiguousarray(flows.transpose(0, 3, 1, 2), dtype=np.float64))
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False).numpy()
    out[:, 0] *= width / w
    out[:, 1] *= height / h
    return out.transpose(0, 2, 3, 1)


def load_dataset(
    videos: Sequence[str | Path],
    spec: DatasetSpec,
    estimator: Optional[FlowEstimator] = None,
) -> list[FlowClip]:
    """Ingest videos; use stored ``.flo`` files when present, else estimate flows."""
    estimator = estimator or CoarseToFineEstimator()
    clips = []
    for v in videos:
        clip = ingest_video(v, spec)
        flows = load_flows(v)
        if flows is not None and spec.stride == 1 and len(flows) >= len(clip) - 1:
            flows = _rescale_flows(flows[: len(clip) - 1], spec.height, spec.width)
        else:
            flows = estimate_clip_flows(clip.frames, estimator)
        clips.append(FlowClip(clip.frames, flows))
    return clips


__all__ = [
    "CoarseToFineEstimator",
    "DatasetSpec",
    "FlowClip",
    "FlowEstimator",
    "GroundTruthEstimator",
    "ImportedFlowEstimator",
    "SyntheticClip",
    "SyntheticClipSpec",
    "estimate_backward_flow",
    "estimate_clip_flows",
    "ingest_video",
    "load_dataset",
    "make_synthetic",
    "read_flo",
    "split_videos",
    "write_flo",
    "write_video",
]
