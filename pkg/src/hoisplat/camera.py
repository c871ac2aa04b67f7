"""Pinhole cameras and the spherical novel-view sampler.

Cameras use the OpenCV convention: x right, y down, z forward, with
x_cam = R @ x_world + t. The sampler draws (radius, elevation, azimuth)
uniformly from its ranges and builds a camera at that spherical coordinate
looking at the sampler origin with world +y up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .geometry import look_at

FULL_BODY_RADIUS = (1.0, 2.5)
UPPER_BODY_RADIUS = (0.7, 1.5)
ELEVATION_DEG = (-30.0, 30.0)
AZIMUTH_DEG = (-180.0, 180.0)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantError("Camera: focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvariantError("Camera: image size must be positive")
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def looking_at(
        cls,
        eye,
        target,
        *,
        width: int,
        height: int,
        focal: float,
        up=(0.0, 1.0, 0.0),
    ) -> "Camera":
        rot, tr = look_at(np.asarray(eye, float), np.asarray(target, float), np.asarray(up, float))
        return cls(
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            rotation=rot,
            translation=tr,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class SphericalSampler:
    """Uniform viewpoint distribution over a spherical shell about `origin`."""

    origin: np.ndarray
    radius_range: tuple[float, float]
    elevation_range_deg: tuple[float, float]
    azimuth_range_deg: tuple[float, float]
    mode: str = "full-body"

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        origin.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        for name in ("radius_range", "elevation_range_deg", "azimuth_range_deg"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise InvariantError(f"SphericalSampler: {name} must be ordered, got ({lo}, {hi})")
        if self.radius_range[0] <= 0:
            raise InvariantError("SphericalSampler: radius must be positive")
        if self.mode not in ("full-body", "upper-body"):
            raise InvariantError("SphericalSampler: mode must be 'full-body' or 'upper-body'")

    @classmethod
    def full_body(cls, origin=(0.0, 0.0, 0.0)) -> "SphericalSampler":
        return cls(origin, FULL_BODY_RADIUS, ELEVATION_DEG, AZIMUTH_DEG, "full-body")

    @classmethod
    def upper_body(cls, origin) -> "SphericalSampler":
        return cls(origin, UPPER_BODY_RADIUS, ELEVATION_DEG, AZIMUTH_DEG, "upper-body")


def spherical_to_cartesian(r: float, elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Offset from the sphere origin; azimuth 0 looks down +z, elevation up +y."""
    el = np.deg2rad(elevation_deg)
    az = np.deg2rad(azimuth_deg)
    return r * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])


def sample_viewpoint(
    sampler: SphericalSampler,
    rng: np.random.Generator,
    *,
    width: int = 512,
    height: int = 512,
    focal: float | None = None,
) -> tuple[Camera, tuple[float, float, float]]:
    """Draw (r, elevation, azimuth) uniformly and build the look-at camera.

    Returns the camera and the drawn spherical coordinates (for tracing).
    """
    r = float(rng.uniform(*sampler.radius_range))
    el = float(rng.uniform(*sampler.elevation_range_deg))
    az = float(rng.uniform(*sampler.azimuth_range_deg))
    eye = sampler.origin + spherical_to_cartesian(r, el, az)
    if focal is None:
        focal = 1.1 * max(width, height)
    cam = Camera.looking_at(eye, sampler.origin, width=width, height=height, focal=focal)
    return cam, (r, el, az)
