"""Finite-strain growth and remodeling of engineered tissue during in vitro maturation."""

__version__ = "0.1.0"
