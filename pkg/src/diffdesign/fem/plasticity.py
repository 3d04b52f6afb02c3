"""Small-strain J2 plasticity with perfect plasticity (no hardening).

The stress update is the classical radial return on the 3D deviator. Under
plane stress the out-of-plane strain increment e is an extra unknown per
quadrature point, fixed by requiring the updated out-of-plane stress to
vanish. That scalar equation g(e) = 0 has derivative bounded below by the
bulk-ish modulus lam + 2 mu / 3, so g is strictly increasing and the root is
bracketed analytically and bisected to machine precision. Under plane strain
e = 0 and the out-of-plane stress is carried as state.

Differentiation: the update map is replayed on the reverse-mode tape at the
committed state, and the implicit dependence through e is folded in with the
implicit function theorem (de/dtheta = -g_theta / g_e). The loading history
is differentiated by a reverse sweep over load steps: each step contributes
an adjoint solve with the consistent tangent transposed, and cotangents on
the committed stresses and strains are carried to the previous step.

Loading is displacement driven on the same boundary pattern as the
hyperelastic problem: bottom edge uy = 0, top edge uy prescribed, bottom
left corner ux = 0. The reported scalar per step is the volume-averaged
axial stress.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import GridMesh
from .linear import isotropic_stiffness, unit_element_stiffness
from .hyperelastic import NewtonError
from .. import autodiff as ad

_VM_FLOOR = 1e-200        # keeps sqrt/div regular at zero stress


def _lame(E, nu):
    lam = E * (nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    mu = E * (0.5 / (1.0 + nu))
    return lam, mu


def _sigma_of_e(deps, e, sig_prev, lam, mu, sig0):
    """Radial-return update at a given out-of-plane strain increment.

    All arrays (nqp, ...). Returns (sig_new (nqp, 4), f_trial (nqp,)) with
    stress components ordered (xx, yy, xy, zz).
    """
    tr = deps[:, 0] + deps[:, 1] + e
    t_xx = sig_prev[:, 0] + lam * tr + 2.0 * mu * deps[:, 0]
    t_yy = sig_prev[:, 1] + lam * tr + 2.0 * mu * deps[:, 1]
    t_xy = sig_prev[:, 2] + mu * deps[:, 2]
    t_zz = sig_prev[:, 3] + lam * tr + 2.0 * mu * e
    p = (t_xx + t_yy + t_zz) / 3.0
    sx, sy, sz = t_xx - p, t_yy - p, t_zz - p
    vm = np.sqrt(np.maximum(1.5 * (sx * sx + sy * sy + sz * sz)
                            + 3.0 * t_xy * t_xy, _VM_FLOOR))
    f = vm - sig0
    fac = np.maximum(f, 0.0) / vm
    out = np.empty((deps.shape[0], 4))
    out[:, 0] = t_xx - fac * sx
    out[:, 1] = t_yy - fac * sy
    out[:, 2] = t_xy - fac * t_xy
    out[:, 3] = t_zz - fac * sz
    return out, f


def return_map(deps, sig_prev, E, sig0, nu, model="plane_stress"):
    """Vectorized stress update over quadrature points.

    deps: (nqp, 3) in-plane strain increments (engineering shear).
    sig_prev: (nqp, 4) committed stresses (xx, yy, xy, zz).
    Returns (sig_new (nqp, 4), e_inc (nqp,), f_trial (nqp,)).
    """
    lam, mu = _lame(E, nu)
    nqp = deps.shape[0]
    if model == "plane_strain":
        e = np.zeros(nqp)
        sig_new, f = _sigma_of_e(deps, e, sig_prev, lam, mu, sig0)
        return sig_new, e, f
    if model != "plane_stress":
        raise ValueError(f"unknown model {model!r}")

    # elastic guess keeps the out-of-plane stress at zero exactly
    e = -(lam / (lam + 2.0 * mu)) * (deps[:, 0] + deps[:, 1])
    sig_new, f = _sigma_of_e(deps, e, sig_prev, lam, mu, sig0)
    f_trial = f.copy()
    plastic = f > 0.0
    if np.any(plastic):
        idx = np.flatnonzero(plastic)
        sub = (deps[idx], sig_prev[idx], lam[idx] if np.ndim(lam) else lam,
               mu[idx] if np.ndim(mu) else mu,
               sig0[idx] if np.ndim(sig0) else sig0)
        e[idx] = _bisect_zz(sub, e[idx])
        upd, _ = _sigma_of_e(deps[idx], e[idx], sig_prev[idx], sub[2],
                             sub[3], sub[4])
        sig_new[idx] = upd
    sig_new[:, 3] = 0.0           # constraint holds to bisection tolerance
    return sig_new, e, f_trial


def _bisect_zz(sub, e0):
    """Solve sigma_zz(e) = 0 on the plastic subset; g is monotone in e."""
    deps, sig_prev, lam, mu, sig0 = sub

    def g(e):
        s, _ = _sigma_of_e(deps, e, sig_prev, lam, mu, sig0)
        return s[:, 3]

    g0 = g(e0)
    slope_min = lam + 2.0 * mu / 3.0
    r = np.abs(g0) / slope_min * (1.0 + 1e-9) + 1e-300
    lo = np.where(g0 > 0.0, e0 - r, e0)
    hi = np.where(g0 > 0.0, e0, e0 + r)
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        pos = g(mid) >= 0.0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return 0.5 * (lo + hi)


def _tape_update(deps, e_inc, sig_prev, E_qp, sig0_qp, nu, model):
    """Replay the update on the autodiff tape at committed values.

    Returns (leaves, outputs): leaves maps names to leaf Values, outputs is
    (sx, sy, sxy, szz) Values of shape (nqp,).
    """
    dx = ad.leaf(deps[:, 0])
    dy = ad.leaf(deps[:, 1])
    dg = ad.leaf(deps[:, 2])
    e = ad.leaf(e_inc) if model == "plane_stress" else ad.constant(e_inc)
    spx = ad.leaf(sig_prev[:, 0])
    spy = ad.leaf(sig_prev[:, 1])
    spxy = ad.leaf(sig_prev[:, 2])
    if model == "plane_strain":
        spz = ad.leaf(sig_prev[:, 3])
    else:
        spz = ad.constant(np.zeros_like(e_inc))
    E = ad.leaf(E_qp)
    s0 = ad.leaf(sig0_qp)

    lam = E * (nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    mu = E * (0.5 / (1.0 + nu))
    tr = dx + dy + e
    t_xx = spx + lam * tr + 2.0 * mu * dx
    t_yy = spy + lam * tr + 2.0 * mu * dy
    t_xy = spxy + mu * dg
    t_zz = spz + lam * tr + 2.0 * mu * e
    p = (t_xx + t_yy + t_zz) * (1.0 / 3.0)
    sx_d = t_xx - p
    sy_d = t_yy - p
    sz_d = t_zz - p
    ss = 1.5 * (sx_d * sx_d + sy_d * sy_d + sz_d * sz_d) \
        + 3.0 * (t_xy * t_xy)
    vm = ad.sqrt(ad.clip_min(ss, _VM_FLOOR))
    fac = ad.relu(vm - s0) / vm
    sx = t_xx - fac * sx_d
    sy = t_yy - fac * sy_d
    sxy = t_xy - fac * t_xy
    szz = t_zz - fac * sz_d
    leaves = {"dx": dx, "dy": dy, "dg": dg, "e": e, "spx": spx, "spy": spy,
              "spxy": spxy, "spz": spz, "E": E, "s0": s0}
    return leaves, (sx, sy, sxy, szz)


_LEAF_NAMES = ("dx", "dy", "dg", "spx", "spy", "spxy", "spz", "E", "s0")


def _update_rows(deps, e_inc, sig_prev, E_qp, sig0_qp, nu, model):
    """Per-qp partial derivatives of each stress output w.r.t. each input.

    Returns rows[c][name] for c in (xx, yy, xy, zz), with the plane-stress
    constraint already folded in through the implicit function theorem.
    """
    leaves, outs = _tape_update(deps, e_inc, sig_prev, E_qp, sig0_qp,
                                nu, model)
    ones = np.ones(deps.shape[0])
    raw = [ad.backward(o, cotangent=ones) for o in outs]

    def row_of(grads, name):
        v = leaves.get(name)
        g = grads.get(v)
        return g if g is not None else np.zeros(deps.shape[0])

    if model == "plane_stress":
        g_e = row_of(raw[3], "e")
        if np.any(np.abs(g_e) < 1e-30):
            raise FloatingPointError("degenerate out-of-plane sensitivity")
        rows = []
        for c in range(3):
            r = {}
            scale = row_of(raw[c], "e") / g_e
            for name in _LEAF_NAMES:
                r[name] = row_of(raw[c], name) - scale * row_of(raw[3], name)
            rows.append(r)
        rows.append({name: np.zeros(deps.shape[0]) for name in _LEAF_NAMES})
        return rows
    return [{name: row_of(raw[c], name) for name in _LEAF_NAMES}
            for c in range(4)]


def _combine(rows, weights):
    """Input cotangents for output cotangent `weights` (nqp, 4)."""
    out = {}
    for name in _LEAF_NAMES:
        acc = weights[:, 0] * rows[0][name]
        for c in range(1, 4):
            acc = acc + weights[:, c] * rows[c][name]
        out[name] = acc
    return out


@dataclass
class PlasticStep:
    load: float
    u: np.ndarray                # (n_dofs,)
    deps: np.ndarray             # (nqp, 3) strain increment of this step
    sig: np.ndarray              # (nqp, 4) committed stress
    e_inc: np.ndarray            # (nqp,) out-of-plane strain increment
    f_trial: np.ndarray          # (nqp,) trial yield value
    sbar: float                  # volume-averaged axial stress


@dataclass
class PlasticHistory:
    loads: np.ndarray
    steps: list = field(default_factory=list)

    @property
    def sbar(self) -> np.ndarray:
        return np.array([s.sbar for s in self.steps])


class PlasticityProblem:
    """Displacement-driven tension of a pixelated elastoplastic block."""

    def __init__(self, nx, ny, nu=0.3, model="plane_stress",
                 tangent="consistent", newton_rtol=1e-8, newton_atol=1e-10,
                 max_iter=80):
        if model not in ("plane_stress", "plane_strain"):
            raise ValueError(f"unknown model {model!r}")
        if tangent not in ("elastic", "consistent"):
            raise ValueError(f"unknown tangent {tangent!r}")
        self.mesh = GridMesh(nx, ny)
        self.nu = nu
        self.model = model
        self.tangent = tangent
        self.newton_rtol = newton_rtol
        self.newton_atol = newton_atol
        self.max_iter = max_iter

        m = self.mesh
        bottom = m.edge_nodes("bottom")
        top = m.edge_nodes("top")
        fixed = [2 * m.node_id(0, 0)]
        fixed += [2 * n + 1 for n in bottom]
        self.driven = np.array([2 * n + 1 for n in top])
        self.fixed = np.array(sorted(set(fixed)))
        mask = np.ones(m.n_dofs, dtype=bool)
        mask[self.fixed] = False
        mask[self.driven] = False
        self.free = np.flatnonzero(mask)

        ed = m.elem_dofs
        self._rows = np.repeat(ed, 8, axis=1).ravel()
        self._cols = np.tile(ed, (1, 8)).ravel()
        self.n_qp = 4 * m.n_elems
        self.w_qp = m.gauss_detj          # identical physical weights
        self.volume = m.lx * m.ly
        self.K1 = unit_element_stiffness(m, nu, model)

    # ------------------------------------------------------------- helpers

    def _check_fields(self, E, sig0):
        E = np.asarray(E, dtype=float).ravel()
        sig0 = np.asarray(sig0, dtype=float).ravel()
        ne = self.mesh.n_elems
        if E.shape != (ne,) or sig0.shape != (ne,):
            raise ValueError(f"expected per-element fields of length {ne}")
        if np.any(E <= 0.0) or np.any(sig0 <= 0.0) \
                or not np.all(np.isfinite(E)) or not np.all(np.isfinite(sig0)):
            raise ValueError("moduli and yield stresses must be finite "
                             "and positive")
        return E, sig0

    def _qp_strains(self, u):
        m = self.mesh
        eps = np.einsum("gsd,ed->egs", m.strain_B, u[m.elem_dofs])
        return eps.reshape(self.n_qp, 3)

    def _assemble_forces(self, sig):
        m = self.mesh
        s = sig.reshape(m.n_elems, 4, 4)[..., :3]
        re = self.w_qp * np.einsum("gsd,egs->ed", m.strain_B, s)
        r = np.zeros(m.n_dofs)
        np.add.at(r, m.elem_dofs.ravel(), re.ravel())
        return r

    def _assemble_strain_cotangent(self, c_eps):
        """B^T scatter of a per-qp strain cotangent (nqp, 3) to dofs."""
        m = self.mesh
        ce = c_eps.reshape(m.n_elems, 4, 3)
        re = np.einsum("gsd,egs->ed", m.strain_B, ce)
        r = np.zeros(m.n_dofs)
        np.add.at(r, m.elem_dofs.ravel(), re.ravel())
        return r

    def _assemble_tangent(self, D):
        """Stiffness from per-qp 3x3 moduli (nqp, 3, 3)."""
        m = self.mesh
        Dq = D.reshape(m.n_elems, 4, 3, 3)
        ke = self.w_qp * np.einsum("gsa,egst,gtb->eab", m.strain_B, Dq,
                                   m.strain_B)
        return sp.coo_matrix((ke.ravel(), (self._rows, self._cols)),
                             shape=(m.n_dofs, m.n_dofs)).tocsc()

    def _consistent_D(self, deps, e_inc, sig_prev, E_qp, sig0_qp):
        rows = _update_rows(deps, e_inc, sig_prev, E_qp, sig0_qp, self.nu,
                            self.model)
        D = np.empty((self.n_qp, 3, 3))
        for c in range(3):
            D[:, c, 0] = rows[c]["dx"]
            D[:, c, 1] = rows[c]["dy"]
            D[:, c, 2] = rows[c]["dg"]
        return D

    def _sbar(self, sig):
        return self.w_qp * float(sig[:, 1].sum()) / self.volume

    # -------------------------------------------------------------- solve

    def solve(self, E, sig0, loads, tangent=None) -> PlasticHistory:
        E, sig0 = self._check_fields(E, sig0)
        tangent = self.tangent if tangent is None else tangent
        E_qp = np.repeat(E, 4)
        sig0_qp = np.repeat(sig0, 4)
        m = self.mesh

        lu_el_cache = []

        def lu_el():
            if not lu_el_cache:
                data = (E[:, None, None] * self.K1).ravel()
                K = sp.coo_matrix((data, (self._rows, self._cols)),
                                  shape=(m.n_dofs, m.n_dofs)).tocsc()
                lu_el_cache.append(splu(K[self.free][:, self.free].tocsc()))
            return lu_el_cache[0]

        def evaluate(u, eps_prev, sig_prev):
            deps = self._qp_strains(u) - eps_prev
            sig, e_inc, f_tr = return_map(deps, sig_prev, E_qp, sig0_qp,
                                          self.nu, self.model)
            r = self._assemble_forces(sig)[self.free]
            nr = np.linalg.norm(r)
            if not np.isfinite(nr):
                raise NewtonError("non-finite residual")
            return deps, sig, e_inc, f_tr, r, nr

        def consistent_step(deps, e_inc, sig_prev, r):
            D = self._consistent_D(deps, e_inc, sig_prev, E_qp, sig0_qp)
            K = self._assemble_tangent(D)
            try:
                du = splu(K[self.free][:, self.free].tocsc()).solve(-r)
            except RuntimeError:
                return None            # singular tangent, e.g. full plateau
            return du if np.all(np.isfinite(du)) else None

        def try_direction(u, du, state, eps_prev, sig_prev):
            """Backtrack until the residual norm drops; None if it never does."""
            nr = state[5]
            t = 1.0
            for _ in range(13):
                u_try = u.copy()
                u_try[self.free] += t * du
                trial = evaluate(u_try, eps_prev, sig_prev)
                if trial[5] < (1.0 - 1e-4 * t) * nr:
                    return u_try, trial
                t *= 0.5
            return None

        u = np.zeros(m.n_dofs)
        eps_prev = np.zeros((self.n_qp, 3))
        sig_prev = np.zeros((self.n_qp, 4))
        hist = PlasticHistory(np.asarray(loads, dtype=float))
        for load in hist.loads:
            u = u.copy()
            u[self.driven] = load
            state = evaluate(u, eps_prev, sig_prev)
            r0 = state[5]
            for it in range(self.max_iter):
                deps, sig, e_inc, f_tr, r, nr = state
                if nr <= max(self.newton_rtol * r0, self.newton_atol):
                    break
                # elastic predictor first, then consistent corrections
                du = None
                if tangent == "consistent" and it > 0:
                    du = consistent_step(deps, e_inc, sig_prev, r)
                if du is not None:
                    accepted = try_direction(u, du, state, eps_prev, sig_prev)
                    if accepted is not None:
                        u, state = accepted
                        continue
                du = lu_el().solve(-r)
                accepted = try_direction(u, du, state, eps_prev, sig_prev)
                if accepted is None:
                    raise NewtonError("line search failed on both tangents "
                                      f"(|r| = {nr:.3e})")
                u, state = accepted
            else:
                raise NewtonError(f"no convergence in {self.max_iter} "
                                  f"iterations (|r| = {nr:.3e})")
            deps, sig, e_inc, f_tr, r, nr = state
            eps_prev = eps_prev + deps
            sig_prev = sig
            hist.steps.append(PlasticStep(float(load), u, deps, sig, e_inc,
                                          f_tr, self._sbar(sig)))
        return hist

    # ------------------------------------------------------------- adjoint

    def path_vjp(self, hist: PlasticHistory, E, sig0, v_sbar):
        """Cotangents on the per-step averaged stress pulled back to the
        per-element modulus and yield-stress fields."""
        E, sig0 = self._check_fields(E, sig0)
        v_sbar = np.asarray(v_sbar, dtype=float)
        n = len(hist.steps)
        if v_sbar.shape != (n,):
            raise ValueError("one cotangent per load step expected")
        E_qp = np.repeat(E, 4)
        sig0_qp = np.repeat(sig0, 4)
        m = self.mesh

        v_E_qp = np.zeros(self.n_qp)
        v_s0_qp = np.zeros(self.n_qp)
        a_sig = np.zeros((self.n_qp, 4))     # cotangent on committed stress
        carry_u = np.zeros(m.n_dofs)         # cotangent on this step's u
        for k in range(n - 1, -1, -1):
            st = hist.steps[k]
            sig_prev = hist.steps[k - 1].sig if k > 0 \
                else np.zeros((self.n_qp, 4))
            rows = _update_rows(st.deps, st.e_inc, sig_prev, E_qp, sig0_qp,
                                self.nu, self.model)

            v_out = a_sig.copy()
            v_out[:, 1] += v_sbar[k] * self.w_qp / self.volume
            c1 = _combine(rows, v_out)

            rhs = carry_u + self._assemble_strain_cotangent(
                np.column_stack([c1["dx"], c1["dy"], c1["dg"]]))
            D = np.empty((self.n_qp, 3, 3))
            for c in range(3):
                D[:, c, 0] = rows[c]["dx"]
                D[:, c, 1] = rows[c]["dy"]
                D[:, c, 2] = rows[c]["dg"]
            K = self._assemble_tangent(D)
            lam = np.zeros(m.n_dofs)
            lam[self.free] = splu(K[self.free][:, self.free].tocsc()) \
                .solve(-rhs[self.free], trans="T")

            # residual cotangent on the qp stresses: w * (B lam)
            lam_eps = self._qp_strains(lam) * self.w_qp
            v2 = np.zeros((self.n_qp, 4))
            v2[:, :3] = lam_eps
            c2 = _combine(rows, v2)

            c_dx = c1["dx"] + c2["dx"]
            c_dy = c1["dy"] + c2["dy"]
            c_dg = c1["dg"] + c2["dg"]
            v_E_qp += c1["E"] + c2["E"]
            v_s0_qp += c1["s0"] + c2["s0"]
            a_sig = np.column_stack([c1["spx"] + c2["spx"],
                                     c1["spy"] + c2["spy"],
                                     c1["spxy"] + c2["spxy"],
                                     c1["spz"] + c2["spz"]])
            carry_u = -self._assemble_strain_cotangent(
                np.column_stack([c_dx, c_dy, c_dg]))

        v_E = v_E_qp.reshape(m.n_elems, 4).sum(axis=1)
        v_s0 = v_s0_qp.reshape(m.n_elems, 4).sum(axis=1)
        return v_E, v_s0

    def kink_free_mask(self, hist: PlasticHistory, sig0, rel=1e-6):
        """Quadrature points that stay clear of the yield kink in every step.

        Finite-difference probes of the gradient are only meaningful where no
        perturbation flips a point between elastic and plastic branches.
        """
        sig0_qp = np.repeat(np.asarray(sig0, dtype=float).ravel(), 4)
        ok = np.ones(self.n_qp, dtype=bool)
        for st in hist.steps:
            ok &= np.abs(st.f_trial) > rel * sig0_qp
        return ok

    def kink_free_elements(self, hist: PlasticHistory, sig0, rel=1e-6):
        """Elements whose four quadrature points are all kink-free."""
        qp_ok = self.kink_free_mask(hist, sig0, rel)
        return np.flatnonzero(qp_ok.reshape(self.mesh.n_elems, 4).all(axis=1))
