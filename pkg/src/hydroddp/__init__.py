"""Split-horizon dual dynamic programming for pumped-hydro scheduling."""

__version__ = "0.1.0"
