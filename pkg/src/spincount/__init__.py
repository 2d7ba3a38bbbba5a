"""Simulation and estimation tools for monitored collective spin ensembles."""

__version__ = "0.1.0"
