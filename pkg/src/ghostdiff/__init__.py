"""Monte Carlo ghost diffraction and HBT correlations with pseudo-thermal speckle."""

__version__ = "0.1.0"
