"""Modular visual-motor model-based RL for legged/wheeled robots."""

__version__ = "0.1.0"
