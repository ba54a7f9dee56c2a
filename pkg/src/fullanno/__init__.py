"""Data engine that re-annotates detection datasets through a three-stage
cascade: detection aggregation and filtering, OCR and region description,
and LLM-based integration into dense captions.
"""

from .geometry import KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
