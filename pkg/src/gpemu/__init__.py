"""Gaussian-process emulators of nuclear binding energies and Bayesian calibration through them."""

__version__ = "0.1.0"
