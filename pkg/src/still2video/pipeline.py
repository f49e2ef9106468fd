"""Training loops, multi-step inference and the two reference baselines."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .checkpoint import KIND_GENERATOR, KIND_VAE, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .core import backward_warp, check_frame, denormalize_flow, normalize_flow, stack_condition
from .data import FlowClip
from .errors import ConfigurationError, InvalidInputError, TrainingError
from .flow2rgb import FeatureExtractor, Flow2Rgb, TrunkLayout, generate_next_frame, loss_flow2rgb
from .flow_vae import FlowVAE, LatentDistribution, condition_latent, encode_image, loss_cvae, vae_decode

logger = logging.getLogger(__name__)

ModelRef = Union[nn.Module, str, Path]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig.reduced)
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_steps: int = 2000
    kl_weight: float = 1.0
    kl_warmup: float = 0.0  # fraction of max_steps with a linear KL ramp; 0 disables
    lam: float = 1e-2
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    out_dir: Optional[str] = None
    trunk: str = "compact"
    # opt-in early exit once the monitored training metric (recon L1 for the
    # VAE, pixel RMSE for the generator) falls below this value
    target: Optional[float] = None

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_steps"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.kl_weight < 0 or self.lam < 0 or not 0 <= self.kl_warmup <= 1:
            raise ConfigurationError("kl_weight and lam must be non-negative, kl_warmup in [0, 1]")
        if self.checkpoint_interval < 0:
            raise ConfigurationError("checkpoint_interval must be non-negative")
        if self.trunk not in ("compact", "vgg19"):
            raise ConfigurationError(f"unknown trunk layout {self.trunk!r}")

    @property
    def layout(self) -> TrunkLayout:
        return TrunkLayout.vgg19() if self.trunk == "vgg19" else TrunkLayout.compact()

    def kl_weight_at(self, step: int) -> float:
        if self.kl_warmup <= 0:
            return self.kl_weight
        ramp = self.kl_warmup * self.max_steps
        return self.kl_weight * min(1.0, step / ramp)


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    checkpoint: Optional[Path] = None

    @property
    def steps(self) -> int:
        return len(self.history)


@dataclass
class PredictionResult:
    flows: np.ndarray  # (M, H, W, 2) pixel units
    frames: np.ndarray  # (M, H, W, 3)
    seed: int
    latent: Optional[np.ndarray] = None


class _CsvLog:
    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self.columns = list(columns)
        self._fh = None
        if path is not None:
            self._fh = open(path, "a", newline="")
            self._writer = csv.writer(self._fh)
            if self._fh.tell() == 0:
                self._writer.writerow(self.columns)

    def write(self, row: dict) -> None:
        if self._fh is not None:
            self._writer.writerow([row[c] for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _out_dir(cfg: TrainConfig) -> Optional[Path]:
    if cfg.out_dir is None:
        return None
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _check_finite(loss: torch.Tensor, step: int, batch: np.ndarray) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {step} (batch clips {batch.tolist()})")


def _vae_batch(clips: Sequence[FlowClip], ids: np.ndarray, starts: np.ndarray, cfg: ModelConfig):
    cubes, frames, targets = [], [], []
    for i, s in zip(ids, starts):
        clip = clips[i]
        x0 = clip.frames[s]
        nflows = [normalize_flow(f, cfg.max_disp) for f in clip.flows[s : s + cfg.steps]]
        cubes.append(stack_condition(x0, nflows))
        frames.append(x0.transpose(2, 0, 1))
        targets.append(np.stack([nf.values for nf in nflows]).transpose(3, 0, 1, 2))
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)
    return as_t(cubes), as_t(frames), as_t(targets)


def train_flow_vae(
    dataset: Sequence[FlowClip],
    cfg: TrainConfig,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit the 3D-cVAE on random length-(M+1) crops of ``dataset``."""
    mcfg = cfg.model
    clips = [c for c in dataset if len(c.flows) >= mcfg.steps]
    if not clips:
        raise InvalidInputError(f"no clip provides {mcfg.steps} flows")
    for c in clips:
        if c.frames.shape[1:3] != (mcfg.height, mcfg.width):
            raise ConfigurationError(f"clip resolution {c.frames.shape[1:3]} does not match the model config")
    if cfg.batch_size == 1 and math.prod(mcfg.bottleneck) == 1:
        # batch norm needs more than one value per channel at the bottleneck
        raise ConfigurationError(f"batch_size 1 needs a bottleneck larger than {mcfg.bottleneck}; use batch_size >= 2")

    torch.manual_seed(cfg.seed)
    model = FlowVAE(mcfg, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    out = _out_dir(cfg)
    log = _CsvLog(out / "train_flow_vae.csv" if out else None, ["step", "total", "recon", "kl"])
    history: list[dict] = []
    t0 = time.time()
    try:
        for step in range(1, cfg.max_steps + 1):
            ids = rng.integers(0, len(clips), size=cfg.batch_size)
            starts = np.array([rng.integers(0, len(clips[i].flows) - mcfg.steps + 1) for i in ids])
            cube, x0, target = _vae_batch(clips, ids, starts, mcfg)
            eps = torch.randn(cfg.batch_size, mcfg.latent_dim, generator=noise)
            pred, mu, logvar = model(cube, x0, eps)
            loss = loss_cvae(pred, target, LatentDistribution(mu, logvar), cfg.kl_weight_at(step))
            _check_finite(loss.total, step, ids)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            row = {"step": step, "total": loss.total.item(), "recon": loss.recon.item(), "kl": loss.kl.item()}
            history.append(row)
            log.write(row)
            if on_step:
                on_step(row)
            if step % 50 == 0:
                logger.info("flow_vae step %d total %.5f recon %.5f kl %.3f (%.1fs)", step, row["total"], row["recon"], row["kl"], time.time() - t0)
            if out and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"flow_vae_step{step:06d}.ckpt", model)
            if cfg.target is not None and row["recon"] < cfg.target:
                break
    finally:
        log.close()
    model.eval()
    ckpt = None
    if out:
        ckpt = out / "flow_vae.ckpt"
        save_checkpoint(ckpt, model)
    return TrainResult(model, history, ckpt)


def frame_triples(dataset: Sequence[FlowClip]) -> list[tuple[int, int]]:
    """All ``(clip index, t)`` pairs addressing a ``(x_t, f_t, x_{t+1})`` triple."""
    return [(i, t) for i, c in enumerate(dataset) for t in range(len(c.flows))]


def train_flow2rgb(
    dataset: Sequence[FlowClip],
    cfg: TrainConfig,
    extractor: Optional[FeatureExtractor] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit the frame generator on ``(x_t, f_t, x_{t+1})`` triples from ``dataset``."""
    mcfg = cfg.model
    triples = frame_triples(dataset)
    if not triples:
        raise InvalidInputError("dataset provides no frame triples")
    for c in dataset:
        if c.frames.shape[1:3] != (mcfg.height, mcfg.width):
            raise ConfigurationError(f"clip resolution {c.frames.shape[1:3]} does not match the model config")

    torch.manual_seed(cfg.seed)
    model = Flow2Rgb(mcfg, layout=cfg.layout, seed=cfg.seed)
    model.train()
    extractor = extractor or FeatureExtractor(cfg.layout)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    out = _out_dir(cfg)
    log = _CsvLog(out / "train_flow2rgb.csv" if out else None, ["step", "total", "pixel", "feature"])
    history: list[dict] = []
    t0 = time.time()
    try:
        for step in range(1, cfg.max_steps + 1):
            picks = rng.integers(0, len(triples), size=cfg.batch_size)
            xs, fs, ys = [], [], []
            for p in picks:
                i, t = triples[p]
                c = dataset[i]
                xs.append(c.frames[t].transpose(2, 0, 1))
                fs.append(c.flows[t].transpose(2, 0, 1))
                ys.append(c.frames[t + 1].transpose(2, 0, 1))
            as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)
            pred = model(as_t(xs), as_t(fs))
            loss = loss_flow2rgb(pred, as_t(ys), extractor, cfg.lam)
            _check_finite(loss.total, step, picks)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            row = {"step": step, "total": loss.total.item(), "pixel": loss.pixel.item(), "feature": loss.feature.item()}
            history.append(row)
            log.write(row)
            if on_step:
                on_step(row)
            if step % 50 == 0:
                logger.info("flow2rgb step %d total %.5f pixel-rmse %.4f (%.1fs)", step, row["total"], math.sqrt(row["pixel"]), time.time() - t0)
            if out and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"flow2rgb_step{step:06d}.ckpt", model)
            if cfg.target is not None and math.sqrt(row["pixel"]) < cfg.target:
                break
    finally:
        log.close()
    model.eval()
    ckpt = None
    if out:
        ckpt = out / "flow2rgb.ckpt"
        save_checkpoint(ckpt, model)
    return TrainResult(model, history, ckpt)


def _resolve(ref: ModelRef, kind: str) -> nn.Module:
    if isinstance(ref, nn.Module):
        return ref.eval()
    return load_checkpoint(ref, expect=kind)


def _check_pair(vae: FlowVAE, gen: Flow2Rgb) -> None:
    if not vae.config.compatible_with(gen.config):
        raise ConfigurationError(
            f"checkpoint configurations differ: flow_vae {vae.config} vs flow2rgb {gen.config}"
        )


def rollout_with_flows(
    x0: np.ndarray,
    flows: np.ndarray,
    gen: Optional[ModelRef] = None,
    mode: Literal["generate", "warp_only"] = "generate",
) -> list[np.ndarray]:
    """Iterate ``frame_{t+1} = step(frame_t, flows[t])`` starting from ``x0``."""
    x0 = check_frame(x0, "x0")
    flows = np.asarray(flows)
    if flows.ndim != 4 or flows.shape[1:] != x0.shape[:2] + (2,):
        raise InvalidInputError(f"flows {flows.shape} do not match frame {x0.shape}")
    if mode == "generate":
        if gen is None:
            raise InvalidInputError("generate mode needs a generator")
        model = _resolve(gen, KIND_GENERATOR)
        step = lambda frame, flow: generate_next_frame(frame, flow, model)
    elif mode == "warp_only":
        step = backward_warp
    else:
        raise InvalidInputError(f"unknown rollout mode {mode!r}")
    frames = []
    frame = x0
    for flow in flows:
        frame = step(frame, flow)
        frames.append(frame)
    return frames


def predict_sequence(x0: np.ndarray, seed: int, vae_ckpt: ModelRef, gen_ckpt: ModelRef) -> PredictionResult:
    """Sample one future: prior noise -> M flows -> iterative frame generation."""
    x0 = check_frame(x0, "x0")
    vae = _resolve(vae_ckpt, KIND_VAE)
    gen = _resolve(gen_ckpt, KIND_GENERATOR)
    _check_pair(vae, gen)
    cfg = vae.config
    if x0.shape[:2] != (cfg.height, cfg.width):
        raise ConfigurationError(f"frame {x0.shape[:2]} does not match model resolution {(cfg.height, cfg.width)}")
    eps = np.random.default_rng(seed).standard_normal(cfg.latent_dim)
    z = torch.as_tensor(eps, dtype=torch.float32)
    zc = condition_latent(z, encode_image(x0, vae))
    flows = np.stack([denormalize_flow(nf) for nf in vae_decode(zc, vae)])
    frames = rollout_with_flows(x0, flows, gen, mode="generate")
    return PredictionResult(flows=flows, frames=np.stack(frames), seed=seed, latent=eps)


def baseline_copy(x0: np.ndarray, M: int) -> list[np.ndarray]:
    """The given frame repeated ``M`` times (same object, not copies)."""
    if M < 1:
        raise InvalidInputError("M must be at least 1")
    return [x0] * M


def baseline_random_flow(
    x0: np.ndarray, M: int, sigma: float = 2.0, seed: int = 0, gen_ckpt: Optional[ModelRef] = None
) -> PredictionResult:
    """Generate frames from i.i.d. per-pixel N(0, sigma) flows (sigma is a standard deviation)."""
    if not sigma > 0:
        raise InvalidInputError("sigma must be positive")
    if M < 1:
        raise InvalidInputError("M must be at least 1")
    x0 = check_frame(x0, "x0")
    if gen_ckpt is None:
        raise InvalidInputError("random-flow baseline needs a generator")
    gen = _resolve(gen_ckpt, KIND_GENERATOR)
    rng = np.random.default_rng(seed)
    flows = rng.normal(0.0, sigma, size=(M,) + x0.shape[:2] + (2,))
    frames = rollout_with_flows(x0, flows, gen, mode="generate")
    return PredictionResult(flows=flows, frames=np.stack(frames), seed=seed)
