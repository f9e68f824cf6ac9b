"""KV-cache and attention-weight extraction into the AQKV dump format."""

from .dumpfile import write_dump
from .extract import ExtractSpec, extract, extract_from_model

__version__ = "0.1.0"
