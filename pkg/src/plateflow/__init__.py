"""License-plate recognition with normalizing-flow verification."""

__version__ = "0.1.0"
