"""Surface-constrained multi-dipole localisation from magnetometer data."""

__version__ = "0.1.0"
