"""FastAPI application implementing the guidance wire protocol.

See the client repository's docs/guidance_protocol.md for the byte layout.
Requests are stateless; a fixed server seed makes responses byte-stable.
"""

from __future__ import annotations

import argparse
import base64
import logging

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .config import ServerConfig
from .model import TinyLatentDiffusion

log = logging.getLogger("guidance_server")

PROTOCOL_VERSION = 1


class GuidanceRequestBody(BaseModel):
    version: int
    height: int
    width: int
    image_b64: str
    prompt: str
    t: float
    cfg_scale: float


def _decode_image(body: GuidanceRequestBody) -> np.ndarray:
    try:
        raw = base64.b64decode(body.image_b64, validate=True)
    except Exception as e:
        raise HTTPException(status_code=400, detail=f"image_b64: invalid base64 ({e})") from None
    expected = body.height * body.width * 3 * 4
    if len(raw) != expected:
        raise HTTPException(
            status_code=400,
            detail=f"image_b64: got {len(raw)} bytes, expected {expected} for (height, width)",
        )
    return np.frombuffer(raw, dtype="<f4").reshape(body.height, body.width, 3)


def create_app(config: ServerConfig | None = None) -> FastAPI:
    config = config or ServerConfig()
    model = TinyLatentDiffusion(config.model_id, seed=config.seed)
    app = FastAPI(title="guidance-server")
    app.state.config = config
    app.state.model = model

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": config.model_id}

    @app.post("/v1/guidance")
    def guidance(body: GuidanceRequestBody):
        if body.version != PROTOCOL_VERSION:
            raise HTTPException(status_code=400, detail=f"version: unsupported ({body.version})")
        if body.height <= 0 or body.width <= 0:
            raise HTTPException(status_code=400, detail="height/width: must be positive")
        lo, hi = config.t_range
        if not (lo <= body.t <= hi):
            raise HTTPException(
                status_code=400, detail=f"t: {body.t} outside the configured range [{lo}, {hi}]"
            )
        if body.cfg_scale <= 0:
            raise HTTPException(status_code=400, detail="cfg_scale: must be positive")
        image = _decode_image(body)
        try:
            grad, w_t = model.guidance_gradient(image, body.prompt, body.t, body.cfg_scale)
        except FloatingPointError as e:
            raise HTTPException(status_code=503, detail=f"model failure: {e}") from None
        return {
            "version": PROTOCOL_VERSION,
            "height": body.height,
            "width": body.width,
            "gradient_b64": base64.b64encode(np.ascontiguousarray(grad, dtype="<f4").tobytes()).decode("ascii"),
            "w_t": float(w_t),
        }

    return app


def main(argv=None) -> int:
    import uvicorn

    ap = argparse.ArgumentParser(description="guidance gradient server")
    ap.add_argument("--port", type=int, default=ServerConfig.port)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--model-id", default=ServerConfig.model_id)
    ap.add_argument("--cfg-scale", type=float, default=ServerConfig.cfg_scale)
    args = ap.parse_args(argv)
    config = ServerConfig(
        model_id=args.model_id, cfg_scale=args.cfg_scale, port=args.port, seed=args.seed
    )
    uvicorn.run(create_app(config), host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
