"""Regression with a misclassified categorical covariate via its mixture representation."""

__version__ = "0.1.0"
