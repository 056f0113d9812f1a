"""Communication-efficient distributed estimation and inference for sparse Cox models."""

__version__ = "0.1.0"
