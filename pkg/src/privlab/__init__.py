"""Simulation lab for matching attacks on anonymized, obfuscated user traces."""

from . import adversary, harness, model, ppm

__version__ = "0.1.0"

__all__ = ["adversary", "harness", "model", "ppm", "__version__"]
