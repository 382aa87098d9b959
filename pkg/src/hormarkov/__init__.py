"""Discrete-time Markov schemes: brackets, splitting, Malliavin weights and regularized laws."""

__version__ = "0.1.0"
