"""Server configuration."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ServerConfig:
    model_id: str = "tiny-latent-v1"
    cfg_scale: float = 15.0
    t_range: tuple[float, float] = (0.02, 0.98)
    device: str = "cpu"
    port: int = 8731
    seed: int = 0  # fixed seed gives byte-stable responses

    def __post_init__(self):
        if self.cfg_scale <= 0:
            raise ValueError("ServerConfig: cfg_scale must be positive")
        lo, hi = self.t_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("ServerConfig: t_range must lie within (0, 1)")
