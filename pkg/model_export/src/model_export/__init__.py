"""Backbone truncation and interchange-format export."""

from .export import ExportError, ExportSpec, build_backbone, export

__version__ = "0.1.0"
