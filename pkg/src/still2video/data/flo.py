"""Middlebury ``.flo`` reader/writer.

Layout: ``b"PIEH"``, int32 width, int32 height, then ``height * width``
interleaved ``(u, v)`` float32 pairs in row-major order, all little-endian.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..core import check_flow
from ..errors import FlowFormatError

FLO_MAGIC = b"PIEH"


def write_flo(flow: np.ndarray, path) -> None:
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Return an ``(H, W, 2)`` float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad .flo magic {data[:4]!r}")
    w, h = np.frombuffer(data, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = 12 + 8 * int(w) * int(h)
    if len(data) < expected:
        raise FlowFormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    flow = np.frombuffer(data, dtype="<f4", count=2 * int(w) * int(h), offset=12)
    return flow.reshape(int(h), int(w), 2).astype(np.float32)
