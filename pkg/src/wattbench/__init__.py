"""Energy-aware performance regression pipeline for containerised APIs."""

__version__ = "0.1.0"
