"""Generalized SART (GenSART) Kaczmarz reconstruction for tomography."""

__version__ = "0.1.0"
