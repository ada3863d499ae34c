"""HTTP service exposing training, evaluation, checks and a mock quantum cloud."""

from .app import create_app

__all__ = ["create_app"]
