"""Finite-element kernels on pixel grids.

Bilinear quadrilaterals, 2x2 Gauss quadrature, one element per image pixel.
Submodules cover periodic homogenization of linear elasticity, Neo-Hookean
hyperelasticity at finite strain, and small-strain J2 plasticity, each with
the exact adjoint machinery needed to pull gradients back to per-element
material fields.
"""

from .mesh import GridMesh, grads_at_gauss, strains_at_gauss
from .linear import (Homogenizer, HomogenizationResult, isotropic_stiffness,
                     unit_element_stiffness)
from .hyperelastic import (HyperelasticProblem, HyperelasticHistory,
                           neo_hookean_pk1, neo_hookean_tangent, NewtonError)
from .plasticity import PlasticityProblem, PlasticHistory, return_map

__all__ = [
    "GridMesh", "grads_at_gauss", "strains_at_gauss",
    "Homogenizer", "HomogenizationResult", "isotropic_stiffness",
    "unit_element_stiffness",
    "HyperelasticProblem", "HyperelasticHistory", "neo_hookean_pk1",
    "neo_hookean_tangent", "NewtonError",
    "PlasticityProblem", "PlasticHistory", "return_map",
]
