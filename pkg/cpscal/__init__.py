"""Pairwise-scan calibration of cascaded thermo-optic phase shifter chains."""

__version__ = "0.1.0"
