"""Closed-loop Kalman state estimation and online feedback optimization for
distribution grids, with the associated stability certificates."""

__version__ = "0.1.0"
