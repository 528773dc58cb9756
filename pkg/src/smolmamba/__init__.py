"""Spiking selective state-space vision models with spike-guided token pruning."""
__version__ = "0.1.0"
