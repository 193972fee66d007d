"""Gradient-ascent optimization of photon storage in Lambda-type ensembles."""

__version__ = "0.1.0"
