"""Calibration of a cell transmission freeway model with a physics-informed autoencoder."""

__version__ = "0.1.0"
