"""The ``FSV1`` checkpoint container.

Layout (all integers little-endian uint32)::

    b"FSV1"
    version
    len(kind) | kind (utf-8)            "flow_vae" or "flow2rgb"
    len(config) | config (utf-8)        flat "key = value" lines
    n_tensors
    per tensor:
        len(name) | name (utf-8)
        ndim | dim_0 ... dim_{ndim-1}
        prod(dims) little-endian float32 values, row-major

The config block always carries ``steps, height, width, latent_dim,
max_disp``; the generator adds its trunk layout and skip flag.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError, FlowFormatError
from .flow2rgb import FeatureExtractor, Flow2Rgb, TrunkLayout
from .flow_vae import FlowVAE

MAGIC = b"FSV1"
VERSION = 1
KIND_VAE = "flow_vae"
KIND_GENERATOR = "flow2rgb"
KIND_EXTRACTOR = "extractor"

PathLike = Union[str, Path]


class CheckpointError(FlowFormatError):
    pass


def _u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def _read_str(f: BinaryIO) -> str:
    n = _read_u32(f)
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw.decode("utf-8")


def _write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    _u32(f, len(raw))
    f.write(raw)


def _format_config(config: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.items())


def _parse_config(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_container(path: PathLike, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        _u32(f, VERSION)
        _write_str(f, kind)
        _write_str(f, _format_config(config))
        _u32(f, len(tensors))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            _write_str(f, name)
            _u32(f, arr.ndim)
            for d in arr.shape:
                _u32(f, d)
            f.write(arr.tobytes())


def read_container(path: PathLike) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not an FSV1 checkpoint")
        version = _read_u32(f)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        kind = _read_str(f)
        config = _parse_config(_read_str(f))
        tensors = {}
        for _ in range(_read_u32(f)):
            name = _read_str(f)
            shape = tuple(_read_u32(f) for _ in range(_read_u32(f)))
            count = int(np.prod(shape, dtype=np.int64))
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return kind, config, tensors


def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out[name] = t.detach().cpu().float().numpy()
    return out


def _load_state(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    for name, target in state.items():
        if name.endswith("num_batches_tracked"):
            continue
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise ConfigurationError(f"tensor {name!r} has shape {arr.shape}, model expects {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr))


def _layout_config(layout: TrunkLayout) -> dict:
    return {
        "trunk_widths": ",".join(map(str, layout.widths)),
        "trunk_convs": ",".join(map(str, layout.convs)),
    }


def _layout_from(config: dict) -> TrunkLayout:
    return TrunkLayout(
        widths=tuple(int(x) for x in config["trunk_widths"].split(",")),
        convs=tuple(int(x) for x in config["trunk_convs"].split(",")),
    )


def save_checkpoint(path: PathLike, model: nn.Module) -> None:
    """Write a :class:`FlowVAE` or :class:`Flow2Rgb` to ``path``."""
    if isinstance(model, FlowVAE):
        kind, config = KIND_VAE, model.config.to_dict()
    elif isinstance(model, Flow2Rgb):
        kind = KIND_GENERATOR
        config = {**model.config.to_dict(), **_layout_config(model.layout), "skips": int(model.skips)}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    write_container(path, kind, config, _state_arrays(model))


def read_config(path: PathLike) -> tuple[str, ModelConfig]:
    kind, config, _ = read_container(path)
    return kind, ModelConfig.from_dict(config)


def load_checkpoint(path: PathLike, expect: str | None = None) -> nn.Module:
    """Rebuild the model stored at ``path`` in eval mode."""
    kind, config, tensors = read_container(path)
    if expect is not None and kind != expect:
        raise ConfigurationError(f"{path}: expected a {expect} checkpoint, found {kind}")
    try:
        cfg = ModelConfig.from_dict(config)
    except KeyError as exc:
        raise CheckpointError(f"{path}: config block lacks {exc}") from None
    if kind == KIND_VAE:
        model: nn.Module = FlowVAE(cfg)
    elif kind == KIND_GENERATOR:
        model = Flow2Rgb(cfg, layout=_layout_from(config), skips=bool(int(config.get("skips", 1))))
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    _load_state(model, tensors)
    return model.eval()


def save_extractor_weights(path: PathLike, extractor: FeatureExtractor) -> None:
    config = {"n_stages": extractor.n_stages, **_layout_config(extractor.layout)}
    write_container(path, KIND_EXTRACTOR, config, _state_arrays(extractor))


def load_extractor_weights(path: PathLike) -> FeatureExtractor:
    """Load extractor weights (e.g. converted VGG-19 convs) from an FSV1 container."""
    kind, config, tensors = read_container(path)
    if kind != KIND_EXTRACTOR:
        raise ConfigurationError(f"{path}: expected an extractor container, found {kind}")
    extractor = FeatureExtractor(_layout_from(config), n_stages=int(config["n_stages"]))
    _load_state(extractor, tensors)
    return extractor
