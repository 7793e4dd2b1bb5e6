"""Cycle-level model of two-phase fault handling in out-of-order cores."""

__version__ = "0.1.0"
