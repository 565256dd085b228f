"""Out-of-core magnitude and absorption-mode processing of 2D FT-ICR MS data."""

__version__ = "0.1.0"
