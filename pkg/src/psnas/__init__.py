"""Differentiable architecture search for uncalibrated photometric stereo."""

__version__ = "0.1.0"
