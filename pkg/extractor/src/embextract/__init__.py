"""Adapter that turns an image folder into embedding files for the fusion
benchmark harness.

Backbones are pluggable through a registry; the ``mock`` backbone is fully
deterministic, needs no weights, and is the only one exercised in CI. Output
files use the harness's binary embedding format, so they plug straight into
its ``validate``/``run`` pipeline.
"""

from embextract.pipeline import ExtractorError, ExtractorSpec, extract
from embextract.registry import available_backbones, get_backbone, register_backbone

__version__ = "0.1.0"

__all__ = [
    "ExtractorError",
    "ExtractorSpec",
    "available_backbones",
    "extract",
    "get_backbone",
    "register_backbone",
]
