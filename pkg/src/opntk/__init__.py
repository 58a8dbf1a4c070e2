"""Shallow branch/trunk neural operators, their neural tangent kernels, and
gradient-descent convergence diagnostics."""

__version__ = "0.1.0"
