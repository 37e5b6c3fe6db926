"""KVTR trace extraction from transformer decoder models."""

from .capture import ConfigError, ExtractionSpec, capture_streams, extract
from .kvtr import write_kvtr

__all__ = ["ConfigError", "ExtractionSpec", "capture_streams", "extract", "write_kvtr"]
