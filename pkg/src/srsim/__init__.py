"""Stretch-rotation visco-elastic simulator with defect regularization."""

__version__ = "0.1.0"
