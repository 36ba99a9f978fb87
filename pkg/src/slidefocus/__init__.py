"""Two-stage whole-slide classification with focus-guided magnification."""

__version__ = "0.1.0"
