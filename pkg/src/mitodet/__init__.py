"""Two-stage mitosis detection and atypical-mitosis classification."""

__version__ = "0.1.0"
