from __future__ import annotations

from dataclasses import asdict, dataclass

from .core import default_max_disp
from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Geometry shared by both networks and stored in every checkpoint.

    ``steps`` is the number of predicted flows/frames (M), ``latent_dim`` the
    size of the bottleneck (D) and ``max_disp`` the flow normalization scale
    in pixels.
    """

    steps: int = 16
    height: int = 128
    width: int = 128
    latent_dim: int = 2000
    max_disp: float = 10.0

    def __post_init__(self):
        if self.steps <= 0 or self.steps % 8:
            raise ConfigurationError(f"steps must be a positive multiple of 8, got {self.steps}")
        for name in ("height", "width"):
            value = getattr(self, name)
            if value <= 0 or value % 32:
                raise ConfigurationError(f"{name} must be a positive multiple of 32, got {value}")
        if self.latent_dim <= 0:
            raise ConfigurationError(f"latent_dim must be positive, got {self.latent_dim}")
        if not self.max_disp > 0:
            raise ConfigurationError(f"max_disp must be positive, got {self.max_disp}")

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(steps=16, height=128, width=128, latent_dim=2000, max_disp=default_max_disp(128))

    @classmethod
    def reduced(cls, latent_dim: int = 256) -> "ModelConfig":
        return cls(steps=8, height=64, width=64, latent_dim=latent_dim, max_disp=default_max_disp(64))

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        """(time, height, width) extent left after the five encoder stages."""
        return (self.steps // 8, self.height // 32, self.width // 32)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            steps=int(d["steps"]),
            height=int(d["height"]),
            width=int(d["width"]),
            latent_dim=int(d["latent_dim"]),
            max_disp=float(d["max_disp"]),
        )

    def compatible_with(self, other: "ModelConfig") -> bool:
        return (
            self.steps == other.steps
            and self.height == other.height
            and self.width == other.width
            and self.max_disp == other.max_disp
        )
