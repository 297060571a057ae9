"""Moving horizon estimation for uncertain nonlinear systems using
point-wise integral quadratic constraints."""

__version__ = "0.1.0"
