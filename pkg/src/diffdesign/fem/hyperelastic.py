"""Compressible Neo-Hookean hyperelasticity at finite strain, plane strain.

Energy density per unit reference volume, with J = det F (F33 = 1) and
I1 = tr(F^T F) + 1:

    W = G/2 (J^(-2/3) I1 - 3) + K/2 (J - 1)^2

G and K come from a per-element Young's modulus and a uniform Poisson ratio,
so W is linear in the modulus field. Loading is displacement driven: the
bottom edge is held (uy = 0), the top edge is pulled to a prescribed uy, and
the bottom-left corner pins ux. Newton iterations use the analytic tangent;
a load step that fails to converge (or inverts an element) is bisected.

The adjoint of a converged state is one linear solve with the (symmetric)
tangent at that state; the modulus gradient then follows from the residual
being linear in E element by element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import GridMesh


class NewtonError(RuntimeError):
    """Raised when a load step cannot be equilibrated."""


def lame_from_young(E, nu):
    """Shear and bulk moduli from Young's modulus and Poisson ratio."""
    E = np.asarray(E, dtype=float)
    return E / (2.0 * (1.0 + nu)), E / (3.0 * (1.0 - 2.0 * nu))


def neo_hookean_energy(F, G, K):
    """W for F of shape (..., 2, 2); G, K broadcast over the batch."""
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(J <= 0.0):
        raise NewtonError("element inversion: det F <= 0")
    I1 = np.einsum("...ij,...ij->...", F, F) + 1.0
    return 0.5 * G * (J ** (-2.0 / 3.0) * I1 - 3.0) + 0.5 * K * (J - 1.0) ** 2


def neo_hookean_pk1(F, G, K):
    """First Piola-Kirchhoff stress for F of shape (..., 2, 2)."""
    F = np.asarray(F, dtype=float)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(J <= 0.0):
        raise NewtonError("element inversion: det F <= 0")
    I1 = np.einsum("...ij,...ij->...", F, F) + 1.0
    FiT = _inv_transpose(F, J)
    J23 = J ** (-2.0 / 3.0)
    G = np.asarray(G, dtype=float)[..., None, None]
    K = np.asarray(K, dtype=float)[..., None, None]
    j = J[..., None, None]
    i1 = I1[..., None, None]
    return G * J23[..., None, None] * (F - (i1 / 3.0) * FiT) \
        + K * j * (j - 1.0) * FiT


def neo_hookean_tangent(F, G, K):
    """dP/dF, shape (..., 2, 2, 2, 2), index order (i, j, k, l)."""
    F = np.asarray(F, dtype=float)
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    I1 = np.einsum("...ij,...ij->...", F, F) + 1.0
    FiT = _inv_transpose(F, J)
    J23 = J ** (-2.0 / 3.0)
    G = np.asarray(G, dtype=float)
    K = np.asarray(K, dtype=float)

    dev = F - (I1[..., None, None] / 3.0) * FiT
    eye = np.eye(2)
    A = -(2.0 / 3.0) * (G * J23)[..., None, None, None, None] \
        * np.einsum("...ij,...kl->...ijkl", dev, FiT)
    A += (G * J23)[..., None, None, None, None] * (
        np.einsum("ik,jl->ijkl", eye, eye)
        - (2.0 / 3.0) * np.einsum("...ij,...kl->...ijkl", FiT, F)
        + (I1 / 3.0)[..., None, None, None, None]
        * np.einsum("...il,...kj->...ijkl", FiT, FiT))
    A += (K * J * (2.0 * J - 1.0))[..., None, None, None, None] \
        * np.einsum("...ij,...kl->...ijkl", FiT, FiT)
    A -= (K * J * (J - 1.0))[..., None, None, None, None] \
        * np.einsum("...il,...kj->...ijkl", FiT, FiT)
    return A


def _inv_transpose(F, J):
    FiT = np.empty_like(F)
    FiT[..., 0, 0] = F[..., 1, 1]
    FiT[..., 0, 1] = -F[..., 1, 0]
    FiT[..., 1, 0] = -F[..., 0, 1]
    FiT[..., 1, 1] = F[..., 0, 0]
    return FiT / J[..., None, None]


@dataclass
class HyperelasticHistory:
    loads: np.ndarray            # (n_steps,) prescribed top displacements
    us: np.ndarray               # (n_steps, n_dofs)
    energies: np.ndarray         # (n_steps,) total stored energy


class HyperelasticProblem:
    """Displacement-driven tension of a pixelated square block."""

    def __init__(self, nx, ny, nu=0.3, newton_rtol=1e-10, newton_atol=1e-12,
                 max_iter=25, max_bisect=10):
        self.mesh = GridMesh(nx, ny)
        self.nu = nu
        self.newton_rtol = newton_rtol
        self.newton_atol = newton_atol
        self.max_iter = max_iter
        self.max_bisect = max_bisect

        m = self.mesh
        bottom = m.edge_nodes("bottom")
        top = m.edge_nodes("top")
        fixed = [2 * m.node_id(0, 0)]                 # corner ux
        fixed += [2 * n + 1 for n in bottom]          # bottom uy
        self.driven = np.array([2 * n + 1 for n in top])
        self.fixed = np.array(sorted(set(fixed)))
        mask = np.ones(m.n_dofs, dtype=bool)
        mask[self.fixed] = False
        mask[self.driven] = False
        self.free = np.flatnonzero(mask)

        ed = m.elem_dofs
        self._rows = np.repeat(ed, 8, axis=1).ravel()
        self._cols = np.tile(ed, (1, 8)).ravel()

    def _check_field(self, E):
        E = np.asarray(E, dtype=float).ravel()
        if E.shape != (self.mesh.n_elems,):
            raise ValueError(f"expected {self.mesh.n_elems} element moduli, "
                             f"got shape {E.shape}")
        if not np.all(np.isfinite(E)) or np.any(E <= 0.0):
            raise ValueError("element moduli must be finite and positive")
        return E

    def _def_grads(self, u):
        m = self.mesh
        g = np.einsum("gsd,ed->egs", m.grad_G, u[m.elem_dofs])
        F = np.empty((m.n_elems, 4, 2, 2))
        F[..., 0, 0] = 1.0 + g[..., 0]
        F[..., 0, 1] = g[..., 1]
        F[..., 1, 0] = g[..., 2]
        F[..., 1, 1] = 1.0 + g[..., 3]
        return F

    def residual(self, u, E):
        """Internal force vector (full dofs)."""
        m = self.mesh
        G, K = lame_from_young(E, self.nu)
        F = self._def_grads(u)
        P = neo_hookean_pk1(F, G[:, None], K[:, None])
        Pv = P.reshape(m.n_elems, 4, 4)
        re = m.gauss_detj * np.einsum("gsd,egs->ed", m.grad_G, Pv)
        r = np.zeros(m.n_dofs)
        np.add.at(r, m.elem_dofs.ravel(), re.ravel())
        return r

    def tangent(self, u, E):
        """Assembled tangent stiffness (full dofs, sparse)."""
        m = self.mesh
        G, K = lame_from_young(E, self.nu)
        F = self._def_grads(u)
        A = neo_hookean_tangent(F, G[:, None], K[:, None])
        A4 = A.reshape(m.n_elems, 4, 4, 4)
        ke = m.gauss_detj * np.einsum("gsa,egst,gtb->eab", m.grad_G, A4,
                                      m.grad_G)
        return sp.coo_matrix((ke.ravel(), (self._rows, self._cols)),
                             shape=(m.n_dofs, m.n_dofs)).tocsc()

    def energy(self, u, E):
        G, K = lame_from_young(E, self.nu)
        W = neo_hookean_energy(self._def_grads(u), G[:, None], K[:, None])
        return self.mesh.gauss_detj * float(W.sum())

    def element_energies(self, u, E):
        """(n_elems,) stored energy per element."""
        G, K = lame_from_young(E, self.nu)
        W = neo_hookean_energy(self._def_grads(u), G[:, None], K[:, None])
        return self.mesh.gauss_detj * W.sum(axis=1)

    # ------------------------------------------------------------- solvers

    def _newton(self, u, E):
        """Equilibrate at the boundary values already written into u."""
        free = self.free
        r0 = None
        for _ in range(self.max_iter):
            r = self.residual(u, E)[free]
            nr = np.linalg.norm(r)
            if r0 is None:
                r0 = nr
            if nr <= max(self.newton_rtol * r0, self.newton_atol):
                return u
            K = self.tangent(u, E)[free][:, free]
            du = splu(K).solve(-r)
            u[free] += du
        raise NewtonError(f"no convergence in {self.max_iter} iterations "
                          f"(|r| = {nr:.3e})")

    def _advance(self, u_from, load_from, load_to, E, depth=0):
        u = u_from.copy()
        u[self.driven] = load_to
        try:
            return self._newton(u, E)
        except NewtonError:
            if depth >= self.max_bisect:
                raise
            mid = 0.5 * (load_from + load_to)
            u_mid = self._advance(u_from, load_from, mid, E, depth + 1)
            return self._advance(u_mid, mid, load_to, E, depth + 1)

    def solve(self, E, loads) -> HyperelasticHistory:
        """March through the prescribed top displacements, warm-starting."""
        E = self._check_field(E)
        loads = np.asarray(loads, dtype=float)
        m = self.mesh
        u = np.zeros(m.n_dofs)
        us = np.empty((len(loads), m.n_dofs))
        energies = np.empty(len(loads))
        prev = 0.0
        for k, load in enumerate(loads):
            u = self._advance(u, prev, load, E)
            prev = load
            us[k] = u
            energies[k] = self.energy(u, E)
        return HyperelasticHistory(loads.copy(), us, energies)

    # ------------------------------------------------------------- adjoint

    def solve_vjp(self, u, E, v_u) -> np.ndarray:
        """Pull a cotangent on the converged displacement back to E.

        v_u components on constrained dofs are ignored: those dofs are data,
        not unknowns.
        """
        E = self._check_field(E)
        free = self.free
        K = self.tangent(u, E)[free][:, free]
        lam = np.zeros(self.mesh.n_dofs)
        lam[free] = splu(K.tocsc()).solve(-np.asarray(v_u, dtype=float)[free],
                                          trans="T")
        # residual is linear in each element modulus
        re_unit = self._element_residuals(u, np.ones_like(E))
        lam_e = lam[self.mesh.elem_dofs]
        return np.einsum("ed,ed->e", lam_e, re_unit)

    def energy_vjp_E(self, u, E):
        """d(energy)/dE at fixed displacement (energy is linear in E)."""
        return self.element_energies(u, np.ones_like(np.asarray(E, float)))

    def _element_residuals(self, u, E):
        m = self.mesh
        G, K = lame_from_young(E, self.nu)
        F = self._def_grads(u)
        P = neo_hookean_pk1(F, G[:, None], K[:, None])
        Pv = P.reshape(m.n_elems, 4, 4)
        return m.gauss_detj * np.einsum("gsd,egs->ed", m.grad_G, Pv)
