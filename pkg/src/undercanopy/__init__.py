"""Under-canopy forest inventory toolkit: synthetic scans, stem detection, evaluation and planning."""

__version__ = "0.1.0"
