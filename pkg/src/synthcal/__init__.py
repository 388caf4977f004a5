"""Bayesian calibration of batch synthesis kinetics with an emulator-accelerated
sampler and constraint-probability process optimization."""

__version__ = "0.1.0"
