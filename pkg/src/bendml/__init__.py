"""Multicut Benders decomposition for stochastic transmission expansion
planning, with random-forest cut filtering."""

__version__ = "0.1.0"
