"""Offline exporter: SAM ViT-H features and mask proposals to TRVF/TRVM."""

from . import cli
from .errors import ExportError
from .export import ExportJob, run_export

__version__ = "0.1.0"

__all__ = ["ExportError", "ExportJob", "cli", "run_export"]
