"""Finite-element solvers as differentiable tape operations.

Each wrapper runs the solver on plain arrays in the forward pass and supplies
the exact adjoint as the VJP, so per-element material fields can sit anywhere
on the reverse-mode tape: downstream of image projections, interpolations, or
a whole denoising sampler.

Three couplings are provided:

* homogenized stiffness of a periodic unit cell (three adjoint solves with
  the reused forward factorization),
* stored-energy history of the hyperelastic tension test (equilibrium makes
  the implicit term vanish, so the pullback is the per-element energy
  density at unit modulus),
* averaged-stress history of the elastoplastic tension test (reverse sweep
  over load steps with one transposed consistent-tangent solve each).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .fem import Homogenizer, HyperelasticProblem, PlasticityProblem


def homogenized_stiffness(hom: Homogenizer, E) -> ad.Value:
    """(3, 3) homogenized stiffness of a per-element modulus Value."""

    def fwd(E_arr):
        res = hom.solve(E_arr)
        return res.C_hom, (res, E_arr.copy())

    def vjp(ctx, g):
        res, E_arr = ctx
        return (hom.vjp(res, E_arr, g),)

    return ad.record("homogenized_stiffness", [E], fwd, vjp)


def hyperelastic_energies(problem: HyperelasticProblem, E, loads) -> ad.Value:
    """(n_steps,) stored energies along the prescribed stretch history.

    At equilibrium the free residual vanishes and the prescribed dofs do not
    move with the design, so d(energy)/d(modulus) is purely the explicit
    per-element energy at unit modulus; no adjoint solve is needed.
    """
    loads = np.asarray(loads, dtype=float)

    def fwd(E_arr):
        hist = problem.solve(E_arr, loads)
        return hist.energies, hist

    def vjp(hist, g):
        ones = np.ones(problem.mesh.n_elems)
        v_E = np.zeros(problem.mesh.n_elems)
        for gk, u in zip(g, hist.us):
            if gk != 0.0:
                v_E += gk * problem.element_energies(u, ones)
        return (v_E,)

    return ad.record("hyperelastic_energies", [E], fwd, vjp)


def hyperelastic_displacement(problem: HyperelasticProblem, E, load) -> ad.Value:
    """Converged displacement field at one prescribed stretch."""

    def fwd(E_arr):
        hist = problem.solve(E_arr, [float(load)])
        return hist.us[-1], (hist.us[-1], E_arr.copy())

    def vjp(ctx, g):
        u, E_arr = ctx
        return (problem.solve_vjp(u, E_arr, g),)

    return ad.record("hyperelastic_displacement", [E], fwd, vjp)


def plastic_stress_curve(problem: PlasticityProblem, E, sig0, loads) -> ad.Value:
    """(n_steps,) volume-averaged axial stress along the loading history."""
    loads = np.asarray(loads, dtype=float)

    def fwd(E_arr, s0_arr):
        hist = problem.solve(E_arr, s0_arr, loads)
        return hist.sbar, (hist, E_arr.copy(), s0_arr.copy())

    def vjp(ctx, g):
        hist, E_arr, s0_arr = ctx
        return problem.path_vjp(hist, E_arr, s0_arr, g)

    return ad.record("plastic_stress_curve", [E, sig0], fwd, vjp)
