"""Synthetic x-ray scattering images and a shallow attribute-classification benchmark."""

__version__ = "0.1.0"
