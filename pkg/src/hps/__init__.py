"""Hierarchical Poincare--Steklov fast direct solver for elliptic problems."""

__version__ = "0.1.0"
