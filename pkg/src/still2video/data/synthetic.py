"""Procedural clips with analytic backward flows.

Every clip is rendered from a seeded continuous texture: a smooth multi-wave
background plus a few striped rectangular sprites with anti-aliased edges.
Frame ``t`` samples the texture at ``warp_t(p)``, so the backward flow from
``t+1`` to ``t`` is known in closed form for each motion kind:

``translate``   ``warp_t(p) = p - v t``                     flow ``-v``
``rotate``      ``warp_t(p) = R(-w t)(p - c) + c``          flow ``R(-w)(p - c) + c - p``
``sine_warp``   ``warp_t(x, y) = (x - A sin(k y + s t), y)``  horizontal shear waves

With ``layer="scene"`` the whole texture moves; with ``layer="sprite"`` only
the sprites move over a static background and the flow is zero elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import VideoClip, default_max_disp
from ..errors import InvalidInputError

KINDS = ("translate", "rotate", "sine_warp")
LAYERS = ("scene", "sprite")


@dataclass(frozen=True)
class SyntheticClipSpec:
    kind: str = "translate"
    length: int = 9
    height: int = 64
    width: int = 64
    seed: int = 0
    velocity: tuple[float, float] = (2.0, 0.0)
    angular_velocity: float = 0.05
    center: Optional[tuple[float, float]] = None
    amplitude: float = 1.5
    wavelength: float = 32.0
    phase_speed: float = 0.6
    layer: str = "scene"
    n_sprites: int = 3
    max_disp: Optional[float] = None

    @property
    def steps(self) -> int:
        return self.length - 1

    @property
    def resolved_max_disp(self) -> float:
        return self.max_disp if self.max_disp is not None else default_max_disp(self.height)

    @property
    def resolved_center(self) -> tuple[float, float]:
        if self.center is not None:
            return self.center
        return (float(self.width // 2), float(self.height // 2))


@dataclass
class SyntheticClip:
    clip: VideoClip
    gt_flows: np.ndarray  # (M, H, W, 2)
    interior: np.ndarray  # (M+1, H, W) bool, sprite pixels at least 1 px from an edge
    spec: SyntheticClipSpec = field(repr=False)


@dataclass
class _Sprite:
    center: np.ndarray
    half: np.ndarray
    angle: float
    color: np.ndarray
    stripe_color: np.ndarray
    stripe_period: float
    stripe_angle: float


class _Texture:
    def __init__(self, spec: SyntheticClipSpec, rng: np.random.Generator):
        h, w = spec.height, spec.width
        self.base = rng.uniform(0.35, 0.65, size=3)
        n_waves = 6
        wavelengths = rng.uniform(10.0, 40.0, size=n_waves)
        angles = rng.uniform(0, np.pi, size=n_waves)
        self.freqs = np.stack([np.cos(angles), np.sin(angles)], 1) * (2 * np.pi / wavelengths)[:, None]
        self.phases = rng.uniform(0, 2 * np.pi, size=n_waves)
        self.colors = rng.uniform(-0.06, 0.06, size=(n_waves, 3))
        self.sprites = []
        scale = min(h, w) / 64.0
        for i in range(spec.n_sprites):
            if spec.layer == "sprite" and i == 0:
                c = np.array(spec.resolved_center) + rng.uniform(-2, 2, size=2) * scale
            else:
                c = np.array([rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h])
            self.sprites.append(
                _Sprite(
                    center=c,
                    half=rng.uniform(5.0, 10.0, size=2) * scale,
                    angle=float(rng.uniform(0, np.pi)),
                    color=rng.uniform(0.1, 0.9, size=3),
                    stripe_color=rng.uniform(0.1, 0.9, size=3),
                    stripe_period=float(rng.uniform(7.0, 11.0)),
                    stripe_angle=float(rng.uniform(0, np.pi)),
                )
            )

    def background(self, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base, sx.shape + (3,)).copy()
        for f, ph, col in zip(self.freqs, self.phases, self.colors):
            out += np.cos(f[0] * sx + f[1] * sy + ph)[..., None] * col
        return np.clip(out, 0.0, 1.0)

    def sprite_layer(self, sx: np.ndarray, sy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Composite sprite colors, total alpha and an interior mask at texture coords."""
        color = np.zeros(sx.shape + (3,))
        alpha = np.zeros(sx.shape)
        interior = np.zeros(sx.shape, dtype=bool)
        for sp in self.sprites:
            dx, dy = sx - sp.center[0], sy - sp.center[1]
            ca, sa = np.cos(sp.angle), np.sin(sp.angle)
            lx, ly = ca * dx + sa * dy, -sa * dx + ca * dy
            # signed distance to the rectangle border (positive inside)
            dist = np.minimum(sp.half[0] - np.abs(lx), sp.half[1] - np.abs(ly))
            a = np.clip(dist + 0.5, 0.0, 1.0)
            stripe_coord = np.cos(sp.stripe_angle) * lx + np.sin(sp.stripe_angle) * ly
            s = 0.5 + 0.5 * np.cos(2 * np.pi * stripe_coord / sp.stripe_period)
            c = sp.color * (1 - s[..., None]) + sp.stripe_color * s[..., None]
            color = color * (1 - a[..., None]) + c * a[..., None]
            alpha = alpha * (1 - a) + a
            interior = (interior & (a <= 0)) | (dist >= 1.5)
        return color, alpha, interior


def _motion_coords(spec: SyntheticClipSpec, t: float, x: np.ndarray, y: np.ndarray):
    """Texture coordinates seen by pixel ``(x, y)`` at time ``t``."""
    if spec.kind == "translate":
        vx, vy = spec.velocity
        return x - vx * t, y - vy * t
    if spec.kind == "rotate":
        cx, cy = spec.resolved_center
        a = -spec.angular_velocity * t
        dx, dy = x - cx, y - cy
        return np.cos(a) * dx - np.sin(a) * dy + cx, np.sin(a) * dx + np.cos(a) * dy + cy
    k = 2 * np.pi / spec.wavelength
    return x - spec.amplitude * np.sin(k * y + spec.phase_speed * t), y


def _motion_flow(spec: SyntheticClipSpec, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward flow from frame ``t+1`` to frame ``t`` for every moving pixel."""
    if spec.kind == "translate":
        vx, vy = spec.velocity
        return np.stack([np.full_like(x, -vx), np.full_like(y, -vy)], -1)
    if spec.kind == "rotate":
        cx, cy = spec.resolved_center
        a = -spec.angular_velocity
        dx, dy = x - cx, y - cy
        qx = np.cos(a) * dx - np.sin(a) * dy + cx
        qy = np.sin(a) * dx + np.cos(a) * dy + cy
        return np.stack([qx - x, qy - y], -1)
    k = 2 * np.pi / spec.wavelength
    u = spec.amplitude * (np.sin(k * y + spec.phase_speed * t) - np.sin(k * y + spec.phase_speed * (t + 1)))
    return np.stack([u, np.zeros_like(y)], -1)


def _validate(spec: SyntheticClipSpec) -> None:
    if spec.kind not in KINDS:
        raise InvalidInputError(f"unknown synthetic kind {spec.kind!r}; expected one of {KINDS}")
    if spec.layer not in LAYERS:
        raise InvalidInputError(f"unknown layer {spec.layer!r}; expected one of {LAYERS}")
    if spec.length < 2:
        raise InvalidInputError("clip length must be at least 2")
    if spec.height <= 0 or spec.width <= 0:
        raise InvalidInputError("resolution must be positive")
    if spec.kind == "sine_warp" and spec.wavelength <= 0:
        raise InvalidInputError("wavelength must be positive")


def make_synthetic(spec: SyntheticClipSpec) -> SyntheticClip:
    """Render ``spec.length`` frames and the ``spec.length - 1`` analytic backward flows."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    tex = _Texture(spec, rng)
    h, w = spec.height, spec.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)

    frames, interiors, sprite_alpha = [], [], []
    for t in range(spec.length):
        sx, sy = _motion_coords(spec, t, x, y)
        color, alpha, interior = tex.sprite_layer(sx, sy)
        bg = tex.background(sx, sy) if spec.layer == "scene" else tex.background(x, y)
        frames.append(bg * (1 - alpha[..., None]) + color * alpha[..., None])
        interiors.append(interior)
        sprite_alpha.append(alpha)

    flows = []
    for t in range(spec.steps):
        f = _motion_flow(spec, t, x, y)
        if spec.layer == "sprite":
            f = f * (sprite_alpha[t + 1] >= 0.5)[..., None]
        flows.append(f)
    gt = np.stack(flows) if flows else np.zeros((0, h, w, 2))

    max_disp = spec.resolved_max_disp
    largest = float(np.abs(gt).max()) if gt.size else 0.0
    if largest > max_disp:
        raise InvalidInputError(
            f"synthetic motion reaches {largest:.3f} px, exceeding max_disp={max_disp}"
        )
    return SyntheticClip(
        clip=VideoClip(np.clip(np.stack(frames), 0.0, 1.0)),
        gt_flows=gt,
        interior=np.stack(interiors),
        spec=spec,
    )
