"""Spatial SIR epidemics with varying infectivity: exact particle simulation and mean-field limit."""

__version__ = "0.1.0"
