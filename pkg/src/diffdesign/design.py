"""Inverse design by optimizing the noise input of a frozen sampler.

The deterministic sampler is treated as a generator G: latent -> image. A
smooth threshold turns the image into a phase field, material properties are
interpolated between two phases, a finite-element operation maps the fields
to mechanical responses, and a scalar loss compares them with targets. All
of it sits on one reverse-mode tape, so the loss gradient with respect to
the latent comes from a single backward pass, and quasi-Newton iterations
(BFGS with a strong Wolfe line search, or L-BFGS) drive the latent.

Sharpness continuation: the threshold slope gamma is stepped through a fixed
ladder, warm-starting each stage from the previous solution. A stage aborts
when the gradient has numerically vanished (saturated threshold).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adjoint import (homogenized_stiffness, hyperelastic_energies,
                      plastic_stress_curve)
from .diffusion import ddim_generate
from .nn import make_eps_tape_fn

GRAD_FLOOR = 1e-14


# ------------------------------------------------------------- projections

def project(x, gamma):
    """Smooth 0/1 threshold 0.5 * (tanh(gamma * x) + 1) on the tape."""
    return (ad.tanh(x * float(gamma)) + 1.0) * 0.5


def project_np(x, gamma):
    return 0.5 * (np.tanh(gamma * np.asarray(x, dtype=float)) + 1.0)


def interpolate(phase, lo, hi):
    """Two-phase material interpolation lo + (hi - lo) * phase."""
    return phase * (float(hi) - float(lo)) + float(lo)


def binary_fraction(phase, tau=1e-3):
    """Fraction of entries within tau of either pure phase."""
    p = np.asarray(phase, dtype=float).ravel()
    return float(np.mean((p <= tau) | (p >= 1.0 - tau)))


# ------------------------------------------------------------ target curve

@dataclass(frozen=True)
class TargetCurve:
    """Piecewise elastic/saturating stress-strain target.

    Linear up to the yield strain, then a sum of saturating exponentials
    that approaches ``sig_inf``. Consistency (the amplitudes must bridge
    exactly from the yield stress to the asymptote) is enforced at
    construction.
    """
    young: float
    eps_y: float
    sig_inf: float
    amps: tuple
    rates: tuple
    normalize: bool = False   # rescale amps to bridge yield -> asymptote

    def __post_init__(self):
        if len(self.amps) != len(self.rates):
            raise ValueError("one rate per amplitude required")
        if self.eps_y <= 0 or self.young <= 0:
            raise ValueError("yield strain and modulus must be positive")
        gap = self.sig_inf - self.sigma0
        if abs(self.amp_sum - gap) > 1e-9 * max(abs(gap), 1.0):
            if not self.normalize:
                raise ValueError(
                    f"amplitudes sum to {self.amp_sum}, need {gap} to reach "
                    f"the asymptote")
            if self.amp_sum <= 0 or gap <= 0:
                raise ValueError("cannot normalize amplitudes across zero")
            scale = gap / self.amp_sum
            object.__setattr__(
                self, "amps", tuple(scale * a for a in self.amps))

    @property
    def sigma0(self) -> float:
        return self.young * self.eps_y

    @property
    def amp_sum(self) -> float:
        return float(sum(self.amps))

    def values(self, strains) -> np.ndarray:
        x = np.asarray(strains, dtype=float)
        out = self.young * x
        post = x > self.eps_y
        if np.any(post):
            acc = np.full(post.sum(), self.sigma0)
            for a, k in zip(self.amps, self.rates):
                acc = acc + a * (1.0 - np.exp(-k * (x[post] - self.eps_y)))
            out = out.copy()
            out[post] = acc
        return out


# cubic fits of the stored energy of the pure stiff / pure soft blocks
# over the tension ramp, highest power first
STIFF_ENERGY_POLY = (-19.880, 51.245, 0.472, 0.0)
SOFT_ENERGY_POLY = (-0.199, 0.512, 0.005, 0.0)


def energy_target_curve(loads, alpha, stiff_poly=STIFF_ENERGY_POLY,
                        soft_poly=SOFT_ENERGY_POLY):
    """Blend the two pure-phase energy fits: (1 - alpha)*stiff + alpha*soft.

    alpha = 0 asks for the stiff block's response, alpha = 1 for the soft
    one; intermediate values interpolate linearly between the fitted cubics.
    """
    a = float(alpha)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {a}")
    x = np.asarray(loads, dtype=float)
    return (1.0 - a) * np.polyval(stiff_poly, x) + a * np.polyval(soft_poly, x)


# ------------------------------------------------------------------ losses

def stiffness_loss(C, C_target):
    """Sum of squared errors over all nine stiffness entries."""
    d = C - ad.as_value(np.asarray(C_target, dtype=float))
    return ad.vsum(d * d)


def curve_mse(values, target):
    d = values - ad.as_value(np.asarray(target, dtype=float))
    return ad.vmean(d * d)


# ------------------------------------------------------- quasi-Newton core

@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    grad_norm: float
    iters: int
    losses: list
    status: str
    n_evals: int = 0


def _strong_wolfe(line, f0, d0, c1=1e-4, c2=0.9, a_init=1.0, a_max=60.0,
                  max_iter=30):
    """Strong Wolfe search on phi(a); ``line(a) -> (f, dphi, payload)``.

    Returns (a, f, payload) or None when no acceptable step exists.
    """
    if d0 >= 0:
        return None

    def zoom(lo, f_lo, d_lo, hi, f_hi):
        best = None
        for _ in range(max_iter):
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                return best
            # quadratic interpolation with a bisection safeguard
            denom = f_hi - f_lo - d_lo * (hi - lo)
            a = lo + 0.5 * (hi - lo)
            if abs(denom) > 1e-30:
                cand = lo - 0.5 * d_lo * (hi - lo) ** 2 / denom
                span = abs(hi - lo)
                if min(lo, hi) + 0.05 * span < cand < max(lo, hi) - 0.05 * span:
                    a = cand
            f, d, payload = line(a)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi = a, f
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, payload
                best = (a, f, payload)
                if d * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, d_lo = a, f, d
        return best

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = min(float(a_init), a_max)
    payload_prev = None
    for i in range(max_iter):
        f, d, payload = line(a)
        if f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f)
        if abs(d) <= -c2 * d0:
            return a, f, payload
        if d >= 0:
            return zoom(a, f, d, a_prev, f_prev)
        a_prev, f_prev, d_prev, payload_prev = a, f, d, payload
        if a >= a_max:
            return a, f, payload
        a = min(2.0 * a, a_max)
    return (a_prev, f_prev, payload_prev) if payload_prev is not None else None


def bfgs_minimize(fg, x0, max_iter=100, loss_tol=None, grad_tol=None,
                  memory=None, grad_floor=GRAD_FLOOR, callback=None):
    """Minimize a smooth objective with (L-)BFGS and strong Wolfe steps.

    ``fg(x) -> (loss, grad)`` with x of x0's shape. ``memory=None`` keeps the
    dense inverse-Hessian estimate; an integer switches to L-BFGS with that
    many curvature pairs. Iterations stop on ``loss_tol``, ``grad_tol``
    (infinity norm), a numerically dead gradient, a failed line search, or
    the iteration cap; the best-seen point is always returned.
    """
    shape = np.asarray(x0, dtype=float).shape
    x = np.asarray(x0, dtype=float).ravel().copy()
    n = x.size
    evals = [0]

    def eval_at(xf):
        evals[0] += 1
        f, g = fg(xf.reshape(shape))
        return float(f), np.asarray(g, dtype=float).ravel()

    f, g = eval_at(x)
    losses = [f]
    best = (f, x.copy())
    H = np.eye(n) if memory is None else None
    mem = deque(maxlen=int(memory)) if memory is not None else None
    gamma_scale = 1.0
    have_curvature = False
    status = "max_iter"
    it = 0
    while it < max_iter:
        gn = float(np.max(np.abs(g)))
        if loss_tol is not None and f <= loss_tol:
            status = "loss_tol"
            break
        if grad_tol is not None and gn <= grad_tol:
            status = "grad_tol"
            break
        if gn < grad_floor:
            status = "gradient_floor"
            break

        if mem is None:
            p = -(H @ g)
        elif not mem:
            p = -g
        else:
            q = g.copy()
            alphas = []
            for s, y, rho in reversed(mem):
                a_i = rho * (s @ q)
                q -= a_i * y
                alphas.append(a_i)
            q *= gamma_scale
            for (s, y, rho), a_i in zip(mem, reversed(alphas)):
                q += s * (a_i - rho * (y @ q))
            p = -q
        d0 = float(p @ g)
        if d0 >= 0:               # lost positive-definiteness; restart
            if mem is None:
                H = np.eye(n)
            else:
                mem.clear()
            have_curvature = False
            p = -g
            d0 = float(p @ g)

        def line(a):
            fa, ga = eval_at(x + a * p)
            return fa, float(ga @ p), ga

        # without curvature information the unit step can be wildly out of
        # scale (e.g. straight into a saturated threshold), so open the
        # search at a gradient-scaled trial instead
        a_init = 1.0 if have_curvature else min(1.0, 1.0 / max(gn, 1e-12))
        hit = _strong_wolfe(line, f, d0, a_init=a_init)
        if hit is None:
            status = "line_search"
            break
        a, f_new, g_new = hit
        s = a * p
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        it += 1
        losses.append(f)
        if f < best[0]:
            best = (f, x.copy())
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if mem is None:
                if not have_curvature:
                    H *= sy / float(y @ y)
                rho = 1.0 / sy
                Hy = H @ y
                H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) \
                    + rho * (rho * float(y @ Hy) + 1.0) * np.outer(s, s)
                H = 0.5 * (H + H.T)
            else:
                mem.append((s, y, 1.0 / sy))
                gamma_scale = sy / float(y @ y)
            have_curvature = True
        if callback is not None:
            callback(it, x.reshape(shape), f, g.reshape(shape))

    f_best, x_best = best
    if f <= f_best:
        f_best, x_best = f, x
    return OptimResult(x_best.reshape(shape), f_best,
                       float(np.max(np.abs(g))), it, losses, status, evals[0])


# -------------------------------------------------------- stage continuation

@dataclass
class StageTrace:
    gamma: float
    result: OptimResult
    # diagnostics of the optimized latent: mean square and excess kurtosis.
    # A healthy standard-normal input sits near (1, 0); drift is reported,
    # never enforced.
    latent_ms: float = float("nan")
    latent_kurtosis: float = float("nan")


def latent_health(w) -> tuple:
    """(mean square, excess kurtosis) of a flattened latent."""
    v = np.asarray(w, dtype=float).ravel()
    ms = float(np.mean(v * v))
    m2 = float(np.var(v))
    if m2 == 0.0:
        return ms, float("nan")
    m4 = float(np.mean((v - v.mean()) ** 4))
    return ms, m4 / m2 ** 2 - 3.0


def multistage_optimize(objective_of_gamma, w0, gammas=(5.0, 10.0, 20.0, 80.0),
                        iters_per_stage=100, loss_tol=None, grad_tol=None,
                        memory=None, callback=None):
    """Sharpness continuation: warm-start each threshold slope in turn.

    ``objective_of_gamma(gamma)`` returns the ``fg`` callable for one stage.
    Stops early once a stage ends with a numerically vanished gradient, or
    when ``loss_tol`` is already met.
    """
    w = np.asarray(w0, dtype=float).copy()
    stages = []
    for gamma in gammas:
        res = bfgs_minimize(objective_of_gamma(gamma), w,
                            max_iter=iters_per_stage, loss_tol=loss_tol,
                            grad_tol=grad_tol, memory=memory,
                            callback=callback)
        ms, kurt = latent_health(res.x)
        stages.append(StageTrace(float(gamma), res, ms, kurt))
        w = res.x
        if res.status == "gradient_floor":
            break
    return w, stages


# ---------------------------------------------------------- design problems

def make_generator(arch, params, schedule, plan, eta=0.0):
    """Latent-to-sample map of a frozen denoiser under deterministic sampling."""
    eps_tape = make_eps_tape_fn(arch, params)

    def gen(w: ad.Value) -> ad.Value:
        return ddim_generate(eps_tape, schedule, w, plan, eta=eta)

    return gen


class PointTargetDesign:
    """Drive a scalar generator output to a target value (sampler check)."""

    def __init__(self, generator, target):
        self.generator = generator
        self.target = float(target)

    def objective(self, gamma=None):
        def fg(w):
            wv = ad.leaf(w)
            x0 = self.generator(wv)
            d = ad.reshape(x0, (-1,)) - self.target
            loss = ad.vsum(d * d)
            grads = ad.backward(loss)
            return loss.item(), grads.get(wv, np.zeros_like(w))
        return fg


class StiffnessDesign:
    """Match a homogenized stiffness with a two-phase pixel layout."""

    def __init__(self, generator, hom, C_target, E_soft=1.0, E_stiff=100.0):
        self.generator = generator
        self.hom = hom
        self.C_target = np.asarray(C_target, dtype=float)
        self.E_soft = float(E_soft)
        self.E_stiff = float(E_stiff)

    def fields(self, w, gamma):
        """Phase image and modulus field for a latent (plain arrays)."""
        img = self.generator(ad.constant(w)).data.reshape(-1)
        phase = project_np(img, gamma)
        E = self.E_soft + (self.E_stiff - self.E_soft) \
            * phase[self.hom.mesh.pixel_of_elem]
        return phase, E

    def objective(self, gamma):
        def fg(w):
            wv = ad.leaf(w)
            img = ad.reshape(self.generator(wv), (-1,))
            phase = project(img, gamma)
            E = interpolate(ad.take_flat(phase, self.hom.mesh.pixel_of_elem),
                            self.E_soft, self.E_stiff)
            C = homogenized_stiffness(self.hom, E)
            loss = stiffness_loss(C, self.C_target)
            grads = ad.backward(loss)
            return loss.item(), grads.get(wv, np.zeros_like(w))
        return fg


class EnergyCurveDesign:
    """Match stored-energy values along a finite-strain tension history."""

    def __init__(self, generator, problem, loads, target_energies,
                 E_soft=1.0, E_stiff=100.0):
        self.generator = generator
        self.problem = problem
        self.loads = np.asarray(loads, dtype=float)
        self.target = np.asarray(target_energies, dtype=float)
        self.E_soft = float(E_soft)
        self.E_stiff = float(E_stiff)

    def objective(self, gamma):
        def fg(w):
            wv = ad.leaf(w)
            img = ad.reshape(self.generator(wv), (-1,))
            phase = project(img, gamma)
            E = interpolate(
                ad.take_flat(phase, self.problem.mesh.pixel_of_elem),
                self.E_soft, self.E_stiff)
            W = hyperelastic_energies(self.problem, E, self.loads)
            loss = curve_mse(W, self.target)
            grads = ad.backward(loss)
            return loss.item(), grads.get(wv, np.zeros_like(w))
        return fg


class StressCurveDesign:
    """Match an averaged stress-strain curve with a two-phase elastoplastic
    layout; modulus and yield stress interpolate together."""

    def __init__(self, generator, problem, loads, target_curve,
                 E_soft=1.0e3, E_stiff=1.0e5, sig0_soft=30.0,
                 sig0_stiff=300.0):
        self.generator = generator
        self.problem = problem
        self.loads = np.asarray(loads, dtype=float)
        if isinstance(target_curve, TargetCurve):
            self.target = target_curve.values(self.loads)
        else:
            self.target = np.asarray(target_curve, dtype=float)
        self.E_soft, self.E_stiff = float(E_soft), float(E_stiff)
        self.s_soft, self.s_stiff = float(sig0_soft), float(sig0_stiff)

    def objective(self, gamma):
        def fg(w):
            wv = ad.leaf(w)
            img = ad.reshape(self.generator(wv), (-1,))
            phase = project(img, gamma)
            ph_e = ad.take_flat(phase, self.problem.mesh.pixel_of_elem)
            E = interpolate(ph_e, self.E_soft, self.E_stiff)
            s0 = interpolate(ph_e, self.s_soft, self.s_stiff)
            sb = plastic_stress_curve(self.problem, E, s0, self.loads)
            loss = curve_mse(sb, self.target)
            grads = ad.backward(loss)
            return loss.item(), grads.get(wv, np.zeros_like(w))
        return fg
