"""Structured bilinear-quad meshes on rectangles, one element per pixel.

Node (i, j) sits at (i*hx, j*hy) with id j*(nx+1)+i; element (ix, iy) has id
iy*nx+ix and corner nodes ordered counterclockwise from the lower left. All
elements share the same geometry, so shape-function gradients and Jacobians
are computed once. Quadrature is the 2x2 Gauss rule throughout.

Image convention: pixel row 0 is the TOP of the domain, so pixel (r, c) maps
to element (ix=c, iy=ny-1-r).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

_GAUSS = 1.0 / np.sqrt(3.0)
# reference corners, counterclockwise from (-1,-1); matches element node order
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@dataclass(frozen=True)
class GridMesh:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("mesh needs at least one element per direction")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elems(self) -> int:
        return self.nx * self.ny

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def node_id(self, i, j):
        return j * (self.nx + 1) + i

    @cached_property
    def coords(self) -> np.ndarray:
        jj, ii = np.mgrid[0:self.ny + 1, 0:self.nx + 1]
        return np.column_stack([ii.ravel() * self.hx, jj.ravel() * self.hy])

    @cached_property
    def elems(self) -> np.ndarray:
        """(n_elems, 4) node ids, counterclockwise from lower left."""
        iy, ix = np.divmod(np.arange(self.n_elems), self.nx)
        n0 = self.node_id(ix, iy)
        n1 = self.node_id(ix + 1, iy)
        n2 = self.node_id(ix + 1, iy + 1)
        n3 = self.node_id(ix, iy + 1)
        return np.column_stack([n0, n1, n2, n3])

    @cached_property
    def elem_dofs(self) -> np.ndarray:
        """(n_elems, 8) dof ids in [ux0, uy0, ux1, uy1, ...] order."""
        e = self.elems
        out = np.empty((self.n_elems, 8), dtype=np.intp)
        out[:, 0::2] = 2 * e
        out[:, 1::2] = 2 * e + 1
        return out

    # ------------------------------------------------------------ geometry

    @cached_property
    def gauss_detj(self) -> float:
        """Physical weight per Gauss point (unit reference weights)."""
        return self.hx * self.hy / 4.0

    @cached_property
    def shape_grads(self) -> np.ndarray:
        """(4 gp, 4 nodes, 2) physical shape-function gradients."""
        out = np.empty((4, 4, 2))
        for g, (xi, eta) in enumerate(_CORNERS * _GAUSS):
            for a, (xa, ea) in enumerate(_CORNERS):
                dxi = 0.25 * xa * (1.0 + ea * eta)
                deta = 0.25 * ea * (1.0 + xa * xi)
                out[g, a] = [dxi * 2.0 / self.hx, deta * 2.0 / self.hy]
        return out

    @cached_property
    def strain_B(self) -> np.ndarray:
        """(4 gp, 3, 8): engineering-strain operators (exx, eyy, gxy)."""
        B = np.zeros((4, 3, 8))
        dN = self.shape_grads
        for g in range(4):
            for a in range(4):
                B[g, 0, 2 * a] = dN[g, a, 0]
                B[g, 1, 2 * a + 1] = dN[g, a, 1]
                B[g, 2, 2 * a] = dN[g, a, 1]
                B[g, 2, 2 * a + 1] = dN[g, a, 0]
        return B

    @cached_property
    def grad_G(self) -> np.ndarray:
        """(4 gp, 4, 8): displacement-gradient operators
        (du/dx, du/dy, dv/dx, dv/dy)."""
        G = np.zeros((4, 4, 8))
        dN = self.shape_grads
        for g in range(4):
            for a in range(4):
                G[g, 0, 2 * a] = dN[g, a, 0]
                G[g, 1, 2 * a] = dN[g, a, 1]
                G[g, 2, 2 * a + 1] = dN[g, a, 0]
                G[g, 3, 2 * a + 1] = dN[g, a, 1]
        return G

    # ------------------------------------------------------------ boundaries

    def edge_nodes(self, side: str) -> np.ndarray:
        if side == "bottom":
            return np.array([self.node_id(i, 0) for i in range(self.nx + 1)])
        if side == "top":
            return np.array([self.node_id(i, self.ny) for i in range(self.nx + 1)])
        if side == "left":
            return np.array([self.node_id(0, j) for j in range(self.ny + 1)])
        if side == "right":
            return np.array([self.node_id(self.nx, j) for j in range(self.ny + 1)])
        raise ValueError(f"unknown side {side!r}")

    # -------------------------------------------------------- image mapping

    @cached_property
    def pixel_of_elem(self) -> np.ndarray:
        """Flat image index (row-major, row 0 on top) for each element."""
        iy, ix = np.divmod(np.arange(self.n_elems), self.nx)
        return (self.ny - 1 - iy) * self.nx + ix


def strains_at_gauss(mesh: GridMesh, u: np.ndarray) -> np.ndarray:
    """(n_elems, 4, 3) engineering strains from a full dof vector."""
    ue = u[mesh.elem_dofs]
    return np.einsum("gsd,ed->egs", mesh.strain_B, ue)


def grads_at_gauss(mesh: GridMesh, u: np.ndarray) -> np.ndarray:
    """(n_elems, 4, 4) displacement gradients (du/dx, du/dy, dv/dx, dv/dy)."""
    ue = u[mesh.elem_dofs]
    return np.einsum("gsd,ed->egs", mesh.grad_G, ue)
