"""Desk-scale laboratory for a time-localized convex integration scheme for 3D Euler."""

__version__ = "0.1.0"
