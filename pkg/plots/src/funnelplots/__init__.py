"""Figure rendering for funnelsim trace bundles (CSV + metadata JSON)."""

__version__ = "0.1.0"

from .render import PlotSpec, SchemaError, render

__all__ = ["PlotSpec", "SchemaError", "render", "__version__"]
