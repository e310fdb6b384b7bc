"""Sliding-window dynamic GraphSLAM with pluggable pedestrian motion priors."""

__version__ = "0.1.0"
