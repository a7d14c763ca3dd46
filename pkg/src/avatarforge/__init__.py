"""Desk-scale feed-forward reconstruction of animatable textured head meshes."""

__version__ = "0.1.0"

from .config import Config, ConfigError  # noqa: E402
from .estimator import Avatar, AvatarReconstructor  # noqa: E402

__all__ = ["Avatar", "AvatarReconstructor", "Config", "ConfigError", "__version__"]
