"""Linear elasticity on pixel grids: periodic homogenization with adjoints.

The unit cell is meshed one element per pixel. Poisson ratio is uniform, so
every element stiffness is the per-element Young's modulus times a shared
E=1 matrix. Periodicity is enforced by folding slave boundary nodes onto
their masters; the remaining rigid translation is removed by pinning the
reduced node 0. Three unit macroscopic strains (exx, eyy, gxy) are applied
through equivalent loads; columns of the homogenized stiffness are the
volume-averaged stresses of each case.

The adjoint reuses the forward factorization (the reduced stiffness is
symmetric), giving exact gradients of any functional of C_hom with respect
to the per-element modulus field at the cost of three extra solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import GridMesh


def isotropic_stiffness(E, nu, model="plane_stress"):
    """3x3 stiffness for engineering-strain Voigt order (xx, yy, xy)."""
    if model == "plane_stress":
        c = E / (1.0 - nu * nu)
        return c * np.array([[1.0, nu, 0.0],
                             [nu, 1.0, 0.0],
                             [0.0, 0.0, (1.0 - nu) / 2.0]])
    if model == "plane_strain":
        c = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return c * np.array([[1.0 - nu, nu, 0.0],
                             [nu, 1.0 - nu, 0.0],
                             [0.0, 0.0, (1.0 - 2.0 * nu) / 2.0]])
    raise ValueError(f"unknown model {model!r}")


def unit_element_stiffness(mesh: GridMesh, nu, model="plane_stress"):
    """(8, 8) element stiffness for E = 1."""
    C1 = isotropic_stiffness(1.0, nu, model)
    B = mesh.strain_B
    w = mesh.gauss_detj
    return w * np.einsum("gsi,st,gtj->ij", B, C1, B)


@dataclass
class HomogenizationResult:
    C_hom: np.ndarray            # (3, 3)
    u_cases: np.ndarray          # (3, n_dofs) fluctuation fields
    sig_cases: np.ndarray        # (3, n_elems, 4, 3) stresses per unit E
    lu: object                   # factorized reduced stiffness


class Homogenizer:
    """Periodic unit-cell solver for a per-element Young's modulus field."""

    def __init__(self, nx, ny, nu=0.3, model="plane_stress"):
        self.mesh = GridMesh(nx, ny)
        self.nu = nu
        self.model = model
        self.C1 = isotropic_stiffness(1.0, nu, model)
        self.K1 = unit_element_stiffness(self.mesh, nu, model)

        # fold each node onto its periodic master: (i % nx, j % ny)
        m = self.mesh
        jj, ii = np.divmod(np.arange(m.n_nodes), nx + 1)
        red_node = (jj % ny) * nx + (ii % nx)
        red_dof = np.empty(m.n_dofs, dtype=np.intp)
        red_dof[0::2] = 2 * red_node
        red_dof[1::2] = 2 * red_node + 1
        self.red_dof = red_dof
        self.n_red = 2 * nx * ny
        self.free = np.arange(2, self.n_red)  # pin reduced node 0

        self.elem_red = red_dof[m.elem_dofs]          # (n_elems, 8)
        self._rows = np.repeat(self.elem_red, 8, axis=1).ravel()
        self._cols = np.tile(self.elem_red, (1, 8)).ravel()

        # per-unit-E equivalent load of each unit macroscopic strain
        eye = np.eye(3)
        w = m.gauss_detj
        self.q_cases = np.einsum("gsi,st,ct->ci", m.strain_B, self.C1, eye) * w

        self.volume = m.lx * m.ly

    def _check_field(self, E):
        E = np.asarray(E, dtype=float).ravel()
        if E.shape != (self.mesh.n_elems,):
            raise ValueError(f"expected {self.mesh.n_elems} element moduli, "
                             f"got shape {E.shape}")
        if not np.all(np.isfinite(E)) or np.any(E <= 0.0):
            raise ValueError("element moduli must be finite and positive")
        return E

    def solve(self, E) -> HomogenizationResult:
        E = self._check_field(E)
        m = self.mesh

        data = (E[:, None, None] * self.K1).ravel()
        K = sp.coo_matrix((data, (self._rows, self._cols)),
                          shape=(self.n_red, self.n_red)).tocsc()
        K_ff = K[self.free][:, self.free]
        lu = splu(K_ff)

        w = m.gauss_detj
        u_cases = np.empty((3, m.n_dofs))
        sig_cases = np.empty((3, m.n_elems, 4, 3))
        C_hom = np.empty((3, 3))
        eye = np.eye(3)
        for c in range(3):
            f = np.zeros(self.n_red)
            np.add.at(f, self.elem_red.ravel(),
                      (-E[:, None] * self.q_cases[c]).ravel())
            u_red = np.zeros(self.n_red)
            u_red[self.free] = lu.solve(f[self.free])
            u_full = u_red[self.red_dof]
            u_cases[c] = u_full

            eps = np.einsum("gsd,ed->egs", m.strain_B, u_full[m.elem_dofs])
            eps += eye[c]
            sig = eps @ self.C1.T            # per unit E
            sig_cases[c] = sig
            C_hom[:, c] = w * np.einsum("e,egs->s", E, sig) / self.volume

        return HomogenizationResult(C_hom, u_cases, sig_cases, lu)

    def vjp(self, res: HomogenizationResult, E, V) -> np.ndarray:
        """Gradient of sum(V * C_hom) with respect to the modulus field."""
        E = self._check_field(E)
        V = np.asarray(V, dtype=float)
        m = self.mesh
        w = m.gauss_detj
        v_E = np.zeros(m.n_elems)
        for c in range(3):
            g = V[:, c]
            if not np.any(g):
                continue
            # explicit dependence of the averaged stress on E
            v_E += w * np.einsum("egs,s->e", res.sig_cases[c], g) / self.volume

            # adjoint load: d(sum V*C_hom)/du, same 8-vector for every element
            r8 = w * np.einsum("gsi,s->i", m.strain_B, self.C1.T @ g) / self.volume
            rhs = np.zeros(self.n_red)
            np.add.at(rhs, self.elem_red.ravel(),
                      (E[:, None] * r8).ravel())
            lam_red = np.zeros(self.n_red)
            lam_red[self.free] = res.lu.solve(-rhs[self.free])
            lam_full = lam_red[self.red_dof]

            ue = res.u_cases[c][m.elem_dofs]
            lam_e = lam_full[m.elem_dofs]
            relem = ue @ self.K1.T + self.q_cases[c]
            v_E += np.einsum("ed,ed->e", lam_e, relem)
        return v_E
