"""Numerical laboratory for averaging of multiscale SDE-BSDE systems."""
__version__ = "0.1.0"
