"""Multi-site ICU risk prediction workbench."""

__version__ = "0.1.0"
