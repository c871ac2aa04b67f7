"""Latent-diffusion score backend.

The default backend is a compact, fully self-contained latent diffusion
model: an 8x-downsampling encoder into a 4-channel latent space, a two-layer
convolutional noise predictor conditioned on a prompt embedding and the noise
level, a variance-preserving noise schedule, and a matching decoder that maps
the weighted residual back to RGB space. Weights are generated
deterministically from the model id, so a given build of the server is a
fixed pretrained function of its inputs; swapping in a heavyweight denoiser
means implementing the same three-method interface.

Per request the pipeline is the standard score-guidance step: encode the
render, perturb with noise at level t, predict the noise with and without the
prompt, apply classifier-free guidance, and decode w_t * (eps_hat - eps).
"""

from __future__ import annotations

import hashlib

import numpy as np

LATENT_CHANNELS = 4
DOWN_FACTOR = 8
_SCHEDULE_STEPS = 1000


def _seed_from(*parts: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p)
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def _conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution, NHWC layout; kernel (3, 3, Cin, Cout)."""
    h, w, cin = x.shape
    cout = kernel.shape[3]
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, cout), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + h, dx : dx + w, :]
            out += patch @ kernel[dy, dx]
    return out + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x**3)))


class TinyLatentDiffusion:
    """Deterministic latent diffusion backend behind the guidance endpoint."""

    def __init__(self, model_id: str = "tiny-latent-v1", seed: int = 0):
        self.model_id = model_id
        self.seed = seed
        rng = np.random.default_rng(_seed_from(model_id.encode()))
        c = LATENT_CHANNELS
        f2 = DOWN_FACTOR * DOWN_FACTOR
        self.enc_proj = rng.normal(0, 1.0 / np.sqrt(3 * f2), size=(3 * f2, c)).astype(np.float32)
        self.dec_proj = rng.normal(0, 1.0 / np.sqrt(c), size=(c, 3 * f2)).astype(np.float32)
        hidden = 16
        self.w1 = rng.normal(0, 0.18, size=(3, 3, c, hidden)).astype(np.float32)
        self.b1 = np.zeros(hidden, dtype=np.float32)
        self.w2 = rng.normal(0, 0.18, size=(3, 3, hidden, c)).astype(np.float32)
        self.b2 = np.zeros(c, dtype=np.float32)
        self.cond_proj = rng.normal(0, 0.1, size=(32, hidden)).astype(np.float32)
        self.time_proj = rng.normal(0, 0.1, size=(8, hidden)).astype(np.float32)
        betas = np.linspace(0.00085, 0.012, _SCHEDULE_STEPS, dtype=np.float64)
        self.alpha_bar = np.cumprod(1.0 - betas).astype(np.float32)

    # -- embeddings

    def prompt_embedding(self, prompt: str) -> np.ndarray:
        if not prompt:
            return np.zeros(32, dtype=np.float32)
        rng = np.random.default_rng(_seed_from(b"prompt", prompt.encode()))
        return rng.normal(0, 1.0, size=32).astype(np.float32)

    @staticmethod
    def time_embedding(t: float) -> np.ndarray:
        freqs = np.array([1, 2, 4, 8], dtype=np.float32)
        ang = 2.0 * np.pi * t * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)

    # -- latent codec

    def encode(self, image: np.ndarray) -> np.ndarray:
        h, w, _ = image.shape
        hb, wb = h // DOWN_FACTOR, w // DOWN_FACTOR
        blocks = (
            image.reshape(hb, DOWN_FACTOR, wb, DOWN_FACTOR, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(hb, wb, -1)
            .astype(np.float32)
        )
        return blocks @ self.enc_proj

    def decode_gradient(self, latent_grad: np.ndarray, height: int, width: int) -> np.ndarray:
        hb, wb, _ = latent_grad.shape
        blocks = latent_grad @ self.dec_proj
        out = (
            blocks.reshape(hb, wb, DOWN_FACTOR, DOWN_FACTOR, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(hb * DOWN_FACTOR, wb * DOWN_FACTOR, 3)
        )
        return out[:height, :width, :]

    # -- denoiser

    def predict_noise(self, z_t: np.ndarray, t: float, prompt: str) -> np.ndarray:
        cond = (self.prompt_embedding(prompt) @ self.cond_proj + self.time_embedding(t) @ self.time_proj)
        hid = _gelu(_conv2d_same(z_t, self.w1, self.b1) + cond[None, None, :])
        return _conv2d_same(hid, self.w2, self.b2)

    def schedule(self, t: float) -> tuple[float, float]:
        idx = min(int(round(t * (_SCHEDULE_STEPS - 1))), _SCHEDULE_STEPS - 1)
        ab = float(self.alpha_bar[idx])
        return ab, 1.0 - ab  # (alpha_bar, w_t)

    # -- the full guidance step

    def guidance_gradient(self, image: np.ndarray, prompt: str, t: float, cfg_scale: float):
        """Returns (gradient (H, W, 3) float32, w_t)."""
        image = np.asarray(image, dtype=np.float32)
        h, w, _ = image.shape
        pad_h = (-h) % DOWN_FACTOR
        pad_w = (-w) % DOWN_FACTOR
        if pad_h or pad_w:
            image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
        z0 = self.encode(image)
        ab, w_t = self.schedule(t)
        noise_rng = np.random.default_rng(
            _seed_from(
                b"noise",
                self.seed.to_bytes(8, "little", signed=True),
                image.tobytes(),
                prompt.encode(),
                np.float32(t).tobytes(),
            )
        )
        eps = noise_rng.standard_normal(z0.shape).astype(np.float32)
        z_t = np.sqrt(ab, dtype=np.float32) * z0 + np.sqrt(1.0 - ab, dtype=np.float32) * eps
        eps_cond = self.predict_noise(z_t, t, prompt)
        eps_uncond = self.predict_noise(z_t, t, "")
        eps_hat = eps_uncond + np.float32(cfg_scale) * (eps_cond - eps_uncond)
        latent_grad = np.float32(w_t) * (eps_hat - eps)
        grad = self.decode_gradient(latent_grad, h, w).astype(np.float32)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("guidance gradient is not finite")
        return grad, w_t
