"""Feature exporter: frozen vision backbones -> ADFR records + manifests."""

__version__ = "0.1.0"
