"""Guidance gradient microservice (see app.create_app)."""

from .app import create_app
from .config import ServerConfig
from .model import TinyLatentDiffusion

__version__ = "0.1.0"
