"""Safety filters for slow/fast interconnected systems via composite barriers."""

__version__ = "0.1.0"
