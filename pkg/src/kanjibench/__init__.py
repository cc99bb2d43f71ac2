"""Benchmark harness for VAE, GAN and DDPM generators of handwritten glyphs."""

from .errors import (ConfigError, FamilyMismatch, FormatError, InvalidArgument, InvalidInput,
                     InvalidSpec, KanjiBenchError, NoData, TrainingAborted)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FamilyMismatch", "FormatError", "InvalidArgument", "InvalidInput",
    "InvalidSpec", "KanjiBenchError", "NoData", "TrainingAborted", "__version__",
]
