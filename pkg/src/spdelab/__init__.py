"""Numerical laboratory for SPDEs with Dirichlet boundary conditions."""

__version__ = "0.1.0"
