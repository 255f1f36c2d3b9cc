"""Lip-to-speech synthesis with discrete linguistic units, pitch/energy
conditioning and a normalising-flow post-net."""

from .config import ModelConfig, TrainConfig, preset

__all__ = ["ModelConfig", "TrainConfig", "preset"]
__version__ = "0.1.0"
