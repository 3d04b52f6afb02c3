"""Differentiable inverse design: diffusion generators coupled to FEM solvers."""

__version__ = "0.1.0"
