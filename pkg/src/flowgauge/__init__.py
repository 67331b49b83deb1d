"""Target-free structural displacement measurement from video."""
__version__ = "0.1.0"
