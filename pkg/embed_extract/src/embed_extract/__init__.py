"""Transformer feature extraction into the scmm embedding binary format."""

from .extract import ExtractConfig, ExtractError, extract

__all__ = ["ExtractConfig", "ExtractError", "extract"]
