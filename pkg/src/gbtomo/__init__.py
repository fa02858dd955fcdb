"""Gaussian beam quasimodes, Carleman checks and attenuated ray-transform
recovery for damped wave equations on conformally transversally
anisotropic geometries."""

__version__ = "0.1.0"
