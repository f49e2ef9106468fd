"""PNG-sequence ingestion, dataset layout and train/test splits.

On-disk layout::

    <root>/<video>/00000.png, 00001.png, ...     zero-padded frame sequence
    <root>/<video>/flows/00000.flo, ...          optional; flow i maps frame i+1 -> i
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..core import VideoClip
from ..errors import IngestionError, InvalidInputError
from .flo import read_flo, write_flo

FLOW_SUBDIR = "flows"


@dataclass(frozen=True)
class DatasetSpec:
    """Where videos live and how they are split and cropped.

    ``split`` is either a train fraction (``0.8`` gives a seeded 4/5 : 1/5
    split) or explicit inclusive subject ranges such as
    ``{"train": (1, 16), "test": (17, 25)}`` matched against ``personNN`` in
    video directory names.
    """

    root: str
    height: int = 128
    width: int = 128
    clip_length: int = 17
    split: float | dict = 0.8
    seed: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.clip_length < 2:
            raise InvalidInputError("clip_length must be at least 2")
        if isinstance(self.split, float) and not 0.0 < self.split < 1.0:
            raise InvalidInputError("train fraction must lie strictly between 0 and 1")
        if self.stride < 1:
            raise InvalidInputError("stride must be positive")


def _numeric_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def list_frames(path: str | Path) -> list[Path]:
    directory = Path(path)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    return sorted(directory.glob("*.png"), key=_numeric_key)


def load_png(path: str | Path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Read one PNG as float64 ``(H, W, 3)`` in ``[0, 1]``, optionally resized to ``(H, W)``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise IngestionError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def save_png(frame: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def ingest_video(path: str | Path, spec: DatasetSpec) -> VideoClip:
    """Decode a directory of PNG frames, resized bilinearly to the DatasetSpec resolution."""
    frames = list_frames(path)
    if not frames:
        raise IngestionError(f"{path}: no PNG frames found")
    frames = frames[:: spec.stride]
    return VideoClip(np.stack([load_png(f, (spec.height, spec.width)) for f in frames]))


def load_flows(path: str | Path) -> Optional[np.ndarray]:
    flow_dir = Path(path) / FLOW_SUBDIR
    files = sorted(flow_dir.glob("*.flo"), key=_numeric_key) if flow_dir.is_dir() else []
    if not files:
        return None
    return np.stack([read_flo(f) for f in files])


def write_video(directory: str | Path, frames: Sequence[np.ndarray], flows: Optional[np.ndarray] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_png(frame, directory / f"{i:05d}.png")
    if flows is not None:
        (directory / FLOW_SUBDIR).mkdir(exist_ok=True)
        for i, flow in enumerate(flows):
            write_flo(np.asarray(flow, dtype=np.float32), directory / FLOW_SUBDIR / f"{i:05d}.flo")
    return directory


def list_videos(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset root does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("*.png")))


_PERSON = re.compile(r"person(\d+)", re.IGNORECASE)


def split_videos(spec: DatasetSpec) -> tuple[list[Path], list[Path]]:
    """Deterministic train/test partition of the videos under ``spec.root``."""
    videos = list_videos(spec.root)
    if isinstance(spec.split, dict):
        ranges = {k: tuple(v) for k, v in spec.split.items()}
        out: dict[str, list[Path]] = {"train": [], "test": []}
        for v in videos:
            m = _PERSON.search(v.name)
            if not m:
                continue
            pid = int(m.group(1))
            for part in ("train", "test"):
                lo, hi = ranges[part]
                if lo <= pid <= hi:
                    out[part].append(v)
        return out["train"], out["test"]
    order = np.random.default_rng(spec.seed).permutation(len(videos))
    n_train = int(round(spec.split * len(videos)))
    train = sorted(videos[i] for i in order[:n_train])
    test = sorted(videos[i] for i in order[n_train:])
    return train, test
