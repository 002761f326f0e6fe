"""Symbolic engine for solving second-order PDEs through Vessiot distributions,
Frobenius-integrable reductions, and solvable-structure integration."""

__version__ = "0.1.0"
