"""Structure-preserving upwind-DG solver for a Cahn-Hilliard-Darcy tumor model."""

__version__ = "0.1.0"
