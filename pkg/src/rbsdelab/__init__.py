"""Reflected BSDEs stopped at a random default time, on an exact binary lattice."""

__version__ = "0.1.0"
