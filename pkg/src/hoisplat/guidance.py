"""Guidance providers: the text-conditioned gradient oracle behind the
appearance term.

A provider answers a GuidanceRequest (rendered image, prompt, noise level,
cfg scale) with a gradient image and a noise-level weight. Three providers
ship here: NullGuidance (disabled), MockTargetGuidance (desk-scale stand-in
whose gradient pulls the render toward a fixed target image), and
HttpGuidance (client for the JSON-over-HTTP protocol documented in
docs/guidance_protocol.md; a diffusion-backed server lives in the separate
guidance_server package).
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GuidanceUnavailableError, ValidationError

PROTOCOL_VERSION = 1
DEFAULT_CFG_SCALE = 15.0
DEFAULT_T_RANGE = (0.02, 0.98)


@dataclass(frozen=True)
class GuidanceRequest:
    image: np.ndarray  # (H, W, 3) rendered rgb in [0, 1]
    prompt: str
    t: float  # noise level in (0, 1)
    cfg_scale: float

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError("GuidanceRequest: image must be (H, W, 3)")
        if not (0.0 < self.t < 1.0):
            raise ValidationError(f"GuidanceRequest: t must lie in (0, 1), got {self.t}")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class GuidanceResponse:
    gradient: np.ndarray  # (H, W, 3)
    w_t: float

    def __post_init__(self):
        g = np.asarray(self.gradient, dtype=float)
        if g.ndim != 3 or g.shape[2] != 3:
            raise DimensionError("GuidanceResponse: gradient must be (H, W, 3)")
        if not np.all(np.isfinite(g)):
            raise ValidationError("GuidanceResponse: gradient must be finite")
        object.__setattr__(self, "gradient", g)


class GuidanceProvider:
    """Interface: respond to a request with a gradient image and weight."""

    name = "base"

    def guide(self, request: GuidanceRequest) -> GuidanceResponse:
        raise NotImplementedError


class NullGuidance(GuidanceProvider):
    """Disabled guidance: always a zero gradient."""

    name = "null"

    def guide(self, request: GuidanceRequest) -> GuidanceResponse:
        return GuidanceResponse(np.zeros_like(request.image), 1.0)


class MockTargetGuidance(GuidanceProvider):
    """Pulls the render toward a fixed target image: g = x0 - target, w_t = 1.

    Keeps the gradient-through-render structure of score guidance while
    staying fully deterministic; used by the closed-loop synthetic suite.
    """

    name = "mock"

    def __init__(self, target_rgb: np.ndarray):
        target = np.asarray(target_rgb, dtype=float)
        if target.ndim != 3 or target.shape[2] != 3:
            raise DimensionError("MockTargetGuidance: target must be (H, W, 3)")
        self.target = target

    def guide(self, request: GuidanceRequest) -> GuidanceResponse:
        if request.image.shape != self.target.shape:
            raise DimensionError(
                f"MockTargetGuidance: request image {request.image.shape} does not match "
                f"target {self.target.shape}"
            )
        return GuidanceResponse(request.image - self.target, 1.0)


def mock_target_guidance(target_rgb: np.ndarray) -> GuidanceProvider:
    return MockTargetGuidance(target_rgb)


# ---------------------------------------------------------------------------
# Wire protocol (JSON over HTTP); layout documented in docs/guidance_protocol.md


def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")


def _decode_image(data: str, height: int, width: int, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as e:
        raise ValidationError(f"{what}: invalid base64 payload ({e})") from None
    expected = height * width * 3 * 4
    if len(raw) != expected:
        raise DimensionError(f"{what}: payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).astype(float)


def encode_guidance_request(req: GuidanceRequest) -> dict:
    h, w = req.image.shape[:2]
    return {
        "version": PROTOCOL_VERSION,
        "height": h,
        "width": w,
        "image_b64": _encode_image(req.image),
        "prompt": req.prompt,
        "t": float(req.t),
        "cfg_scale": float(req.cfg_scale),
    }


def decode_guidance_request(doc: dict) -> GuidanceRequest:
    if doc.get("version") != PROTOCOL_VERSION:
        raise ValidationError(f"guidance request: unsupported protocol version {doc.get('version')}")
    h, w = int(doc["height"]), int(doc["width"])
    return GuidanceRequest(
        image=_decode_image(doc["image_b64"], h, w, "guidance request"),
        prompt=str(doc["prompt"]),
        t=float(doc["t"]),
        cfg_scale=float(doc["cfg_scale"]),
    )


def encode_guidance_response(resp: GuidanceResponse) -> dict:
    h, w = resp.gradient.shape[:2]
    return {
        "version": PROTOCOL_VERSION,
        "height": h,
        "width": w,
        "gradient_b64": _encode_image(resp.gradient),
        "w_t": float(resp.w_t),
    }


def decode_guidance_response(doc: dict) -> GuidanceResponse:
    if doc.get("version") != PROTOCOL_VERSION:
        raise ValidationError(f"guidance response: unsupported protocol version {doc.get('version')}")
    h, w = int(doc["height"]), int(doc["width"])
    return GuidanceResponse(
        gradient=_decode_image(doc["gradient_b64"], h, w, "guidance response"), w_t=float(doc["w_t"])
    )


class HttpGuidance(GuidanceProvider):
    """Client for POST {base_url}/v1/guidance with GET {base_url}/v1/health."""

    name = "http"

    def __init__(self, base_url: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post_json(self, url: str, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as e:
            raise GuidanceUnavailableError(f"guidance endpoint {url} failed: {e}") from None

    def _get_json(self, url: str) -> dict:
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as e:
            raise GuidanceUnavailableError(f"guidance endpoint {url} failed: {e}") from None

    def health(self) -> dict:
        return self._get_json(self.base_url + "/v1/health")

    def guide(self, request: GuidanceRequest) -> GuidanceResponse:
        doc = self._post_json(self.base_url + "/v1/guidance", encode_guidance_request(request))
        return decode_guidance_response(doc)
