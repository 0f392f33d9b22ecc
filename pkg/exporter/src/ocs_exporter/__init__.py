"""Backbone feature exporter producing interchange dataset directories."""

__version__ = "0.1.0"

from .export import BACKBONES, STAGES, ExportSpec, export_features

__all__ = ["BACKBONES", "STAGES", "ExportSpec", "export_features"]
