"""Numerical laboratory for the G field and the functionals I and K on the unit ball."""

__version__ = "0.1.0"
