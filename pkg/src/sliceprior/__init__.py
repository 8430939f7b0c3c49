"""Cardiac shape reconstruction from sparse apical views with a learned implicit shape prior."""

__version__ = "0.1.0"
