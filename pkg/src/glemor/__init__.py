"""Certified Gramians and balanced reduction for switched linear systems."""

__version__ = "0.1.0"
