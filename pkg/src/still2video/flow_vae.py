"""3D conditional VAE that predicts a volume of M backward flows from one frame.

Layer layout (at 16x128x128, D=2000)::

    VConv1  Conv3d(5->64, k3, p1) BN ReLU, MaxPool(1,2,2)    16x64x64
    VConv2  Conv3d(64->64)        BN ReLU, MaxPool(1,2,2)    16x32x32
    VConv3  Conv3d(64->128)       BN ReLU, MaxPool(2,2,2)     8x16x16
    VConv4  Conv3d(128->256)      BN ReLU, MaxPool(2,2,2)     4x8x8
    VConv5  Conv3d(256->512)      BN ReLU, MaxPool(2,2,2)     2x4x4
    MeanVar Conv3d(512->D, k(2,4,4)) x2                       1x1x1
    VFConv5 ConvT3d(D->512, k(2,4,4)) BN ReLU                 2x4x4
    VFConv4 ConvT3d(512->256, k4 s2 p1) BN ReLU               4x8x8
    VFConv3 ConvT3d(256->128, k4 s2 p1) BN ReLU               8x16x16
    VFConv2 ConvT3d(128->64, k4 s2 p1) BN ReLU               16x32x32
    VFConv1 ConvT3d(64->64, k(3,4,4) s(1,2,2) p1) BN ReLU    16x64x64
    Output  ConvT3d(64->2, k(3,4,4) s(1,2,2) p1) sigmoid     16x128x128

The image encoder is six stride-2 4x4 convolutions (64, 64, 128, 256, 512,
D), the last one with a 4x4 kernel collapsing the 4x4 map to a vector.
Smaller geometries keep every layer and only resize the kernels that touch
the bottleneck (MeanVar, VFConv5, image Conv6) to ``ModelConfig.bottleneck``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .core import NormalizedFlow
from .errors import ConfigurationError, InvalidInputError
from .nn_init import init_module

ENCODER_WIDTHS = (64, 64, 128, 256, 512)
ENCODER_POOLS = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))
IMAGE_WIDTHS = (64, 64, 128, 256, 512)


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    logvar: torch.Tensor


class CvaeLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


class VolumetricEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = []
        in_ch = 5
        for width, pool in zip(ENCODER_WIDTHS, ENCODER_POOLS):
            stages.append(
                nn.Sequential(
                    nn.Conv3d(in_ch, width, 3, 1, 1),
                    nn.BatchNorm3d(width),
                    nn.ReLU(inplace=True),
                    nn.MaxPool3d(pool),
                )
            )
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.mean = nn.Conv3d(in_ch, cfg.latent_dim, cfg.bottleneck)
        self.logvar = nn.Conv3d(in_ch, cfg.latent_dim, cfg.bottleneck)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        for stage in self.stages:
            x = stage(x)
        return self.mean(x).flatten(1), self.logvar(x).flatten(1)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for width in IMAGE_WIDTHS:
            layers += [nn.Conv2d(in_ch, width, 4, 2, 1), nn.ReLU(inplace=True)]
            in_ch = width
        layers.append(nn.Conv2d(in_ch, cfg.latent_dim, cfg.bottleneck[1:]))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).flatten(1)


class VolumetricDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()

        def block(i, o, k, s=1, p=0):
            return nn.Sequential(nn.ConvTranspose3d(i, o, k, s, p), nn.BatchNorm3d(o), nn.ReLU(inplace=True))

        self.stages = nn.ModuleList(
            [
                block(cfg.latent_dim, 512, cfg.bottleneck),
                block(512, 256, 4, 2, 1),
                block(256, 128, 4, 2, 1),
                block(128, 64, 4, 2, 1),
                block(64, 64, (3, 4, 4), (1, 2, 2), 1),
            ]
        )
        self.output = nn.ConvTranspose3d(64, 2, (3, 4, 4), (1, 2, 2), 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z[:, :, None, None, None]
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(self.output(x))


class FlowVAE(nn.Module):
    """Volumetric encoder, image encoder and volumetric decoder.

    Tensor layouts: cube ``(N, M, 5, H, W)``, frames ``(N, 3, H, W)``,
    decoded flows ``(N, 2, M, H, W)`` normalized to ``[0, 1]``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        self.encoder = VolumetricEncoder(cfg)
        self.image_encoder = ImageEncoder(cfg)
        self.decoder = VolumetricDecoder(cfg)
        g = torch.Generator().manual_seed(seed)
        init_module(self, g)
        init_module(self.encoder.mean, g, gain=1.0)
        init_module(self.encoder.logvar, g, gain=0.1)
        init_module(self.image_encoder.net[-1], g, gain=1.0)
        init_module(self.decoder.output, g, gain=1.0)

    def _check_cube(self, cube: torch.Tensor) -> None:
        c = self.config
        expected = (c.steps, 5, c.height, c.width)
        if cube.dim() != 5 or tuple(cube.shape[1:]) != expected:
            raise ConfigurationError(f"cube shape {tuple(cube.shape)} does not match (N, {expected})")

    def _check_image(self, x0: torch.Tensor) -> None:
        c = self.config
        if x0.dim() != 4 or tuple(x0.shape[1:]) != (3, c.height, c.width):
            raise ConfigurationError(
                f"frame shape {tuple(x0.shape)} does not match (N, 3, {c.height}, {c.width})"
            )

    def encode(self, cube: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_cube(cube)
        return self.encoder(cube.permute(0, 2, 1, 3, 4))

    def encode_image(self, x0: torch.Tensor) -> torch.Tensor:
        self._check_image(x0)
        return self.image_encoder(x0)

    def decode(self, zc: torch.Tensor) -> torch.Tensor:
        if zc.dim() != 2 or zc.shape[1] != self.config.latent_dim:
            raise ConfigurationError(
                f"latent shape {tuple(zc.shape)} does not match (N, {self.config.latent_dim})"
            )
        return self.decoder(zc)

    def forward(self, cube: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor):
        """Training pass: returns (decoded flows, mu, logvar)."""
        mu, logvar = self.encode(cube)
        z = mu + torch.exp(0.5 * logvar) * eps
        zc = condition_latent(z, self.encode_image(x0))
        return self.decode(zc), mu, logvar


def _param_tensor(model: nn.Module, x) -> torch.Tensor:
    p = next(model.parameters())
    return _as_tensor(x).to(dtype=p.dtype, device=p.device)


def vae_encode(cube, model: FlowVAE) -> LatentDistribution:
    """Encode one ``(M, 5, H, W)`` cube to its posterior ``(mu, logvar)``."""
    x = _param_tensor(model, cube)
    if x.dim() != 4:
        raise ConfigurationError(f"cube must be (M, 5, H, W), got {tuple(x.shape)}")
    with torch.no_grad():
        mu, logvar = model.encode(x[None])
    return LatentDistribution(mu[0], logvar[0])


def encode_image(x0, model: FlowVAE) -> torch.Tensor:
    x = _param_tensor(model, x0)
    if x.dim() != 3:
        raise ConfigurationError(f"frame must be (H, W, 3), got {tuple(x.shape)}")
    with torch.no_grad():
        return model.encode_image(x.permute(2, 0, 1)[None])[0]


def vae_decode(zc, model: FlowVAE) -> list[NormalizedFlow]:
    z = _param_tensor(model, zc)
    if z.dim() != 1:
        raise ConfigurationError(f"latent code must be a vector, got {tuple(z.shape)}")
    with torch.no_grad():
        out = model.decode(z[None])[0]
    values = out.permute(1, 2, 3, 0).double().numpy()
    return [NormalizedFlow(values=v.copy(), max_disp=model.config.max_disp) for v in values]


def sample_latent(dist: LatentDistribution, eps) -> torch.Tensor:
    """Reparameterized sample ``mu + exp(logvar / 2) * eps``."""
    mu, logvar = _as_tensor(dist.mu), _as_tensor(dist.logvar)
    eps = _as_tensor(eps, mu.dtype)
    if mu.shape != eps.shape or mu.shape != logvar.shape:
        raise InvalidInputError(
            f"dimension mismatch: mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}, eps {tuple(eps.shape)}"
        )
    return mu + torch.exp(0.5 * logvar) * eps


def condition_latent(z, e) -> torch.Tensor:
    """Multiply-add conditioning ``z * e + e``."""
    z, e = _as_tensor(z), _as_tensor(e)
    if z.shape != e.shape:
        raise InvalidInputError(f"latent {tuple(z.shape)} and image code {tuple(e.shape)} differ")
    return z * e + e


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions (and averaged over a batch)."""
    mu, logvar = _as_tensor(dist.mu), _as_tensor(dist.logvar)
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise InvalidInputError("mu/logvar contain non-finite values")
    # expm1(l) - l >= 0 holds far more tightly in floating point than exp(l) - 1 - l
    terms = (torch.expm1(logvar) - logvar).clamp_min(0.0) + mu * mu
    kl = 0.5 * terms.sum(dim=-1)
    return kl.mean() if kl.dim() else kl


def _stack_flows(flows) -> torch.Tensor:
    if isinstance(flows, torch.Tensor):
        return flows
    if isinstance(flows, Sequence) and flows and isinstance(flows[0], NormalizedFlow):
        return torch.as_tensor(np.stack([f.values for f in flows]), dtype=torch.float64)
    return _as_tensor(flows)


def loss_cvae(pred, target, dist: LatentDistribution, kl_weight: float = 1.0) -> CvaeLoss:
    """Mean absolute flow error plus ``kl_weight`` times the KL term."""
    if kl_weight < 0:
        raise InvalidInputError("kl_weight must be non-negative")
    p, t = _stack_flows(pred), _stack_flows(target)
    if p.shape != t.shape:
        raise InvalidInputError(f"pred {tuple(p.shape)} and target {tuple(t.shape)} differ")
    recon = (p - t.to(p.dtype)).abs().mean()
    kl = kl_divergence(dist)
    return CvaeLoss(recon + kl_weight * kl, recon, kl)
