"""End-to-end acceptance checks, one test per shipped guarantee.

Each test is self-contained apart from the shared trained scalar model,
and pins the tolerances the package promises. Run with -v for one
pass/fail line per guarantee.
"""

import time

import numpy as np
import pytest

from diffdesign import autodiff as ad
from diffdesign import data
from diffdesign import diffusion as df
from diffdesign import nn
from diffdesign.adjoint import (homogenized_stiffness, hyperelastic_energies,
                                plastic_stress_curve)
from diffdesign.design import (PointTargetDesign, StiffnessDesign,
                               TargetCurve, bfgs_minimize, binary_fraction,
                               energy_target_curve, interpolate,
                               multistage_optimize, project, project_np,
                               stiffness_loss)
from diffdesign.fem import Homogenizer, HyperelasticProblem, PlasticityProblem

C_TARGET = np.array([[50.0, 12.0, 0.0],
                     [12.0, 60.0, -3.0],
                     [0.0, -3.0, 15.0]])


@pytest.fixture(scope="module")
def scalar_model():
    """Mixture-trained scalar denoiser: 20000 samples, 100 epochs."""
    rng = np.random.default_rng(0)
    samples = data.gmm_sample(data.GmmSpec(), 20000, rng).reshape(-1, 1)
    schedule = df.linear_schedule(1000, 1e-4, 0.02)
    arch = nn.MlpArch(in_dim=1, hidden=64, time_dim=64)
    params = nn.init_params(arch, np.random.default_rng(1))
    cfg = df.TrainConfig(epochs=100, batch=128, lr=1e-4, seed=2)
    t0 = time.perf_counter()
    result = df.train_denoiser(
        lambda pv, xv, t: nn.apply_denoiser(arch, pv, xv, t),
        params, schedule, samples, cfg)
    wall = time.perf_counter() - t0
    assert result.epoch_losses[-1] < 0.5 * result.epoch_losses[0]
    return arch, result.params, schedule, wall


def test_01_scalar_mixture_design_end_to_end(scalar_model):
    arch, params, schedule, train_wall = scalar_model
    t0 = time.perf_counter()
    plan = df.ddim_plan(schedule.T, 50)
    eps_fn = nn.make_eps_fn(arch, params)

    # pick a latent that initially lands near +2.5, then pull it to -2.5
    cand = np.random.default_rng(3).standard_normal((64, 1))
    x0 = df.ddim_sample(eps_fn, schedule, cand, plan)
    w0 = cand[np.argmin(np.abs(x0[:, 0] - 2.5))].reshape(1, 1)
    start = float(df.ddim_sample(eps_fn, schedule, w0, plan)[0, 0])
    assert abs(start - 2.5) < 0.5

    eps_tape = nn.make_eps_tape_fn(arch, params)

    def generator(wv):
        return df.ddim_generate(eps_tape, schedule, wv, plan)

    design = PointTargetDesign(generator, -2.5)
    res = bfgs_minimize(design.objective(), w0, max_iter=20, loss_tol=1e-3)
    wall = train_wall + (time.perf_counter() - t0)
    assert res.loss < 1e-3
    assert res.iters <= 20
    assert wall < 900.0


def test_02_sampled_modes_match_the_mixture(scalar_model):
    arch, params, schedule, _ = scalar_model
    plan = df.ddim_plan(schedule.T, 50)
    eps_fn = nn.make_eps_fn(arch, params)
    x_T = np.random.default_rng(4).standard_normal((10_000, 1))
    x0 = df.ddim_sample(eps_fn, schedule, x_T, plan)[:, 0]

    near_lo = np.abs(x0 + 2.5) <= 4 * 0.5
    near_hi = np.abs(x0 - 2.5) <= 4 * 0.5
    assert np.mean(near_lo | near_hi) >= 0.95
    w_lo = np.mean(x0 < 0.0)
    assert abs(w_lo - 0.5) <= 0.03
    assert abs((1.0 - w_lo) - 0.5) <= 0.03


def test_03a_stiffness_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    hom = Homogenizer(8, 8)
    x = np.random.default_rng(5).normal(size=64) * 0.3

    def f(v):
        return stiffness_loss(homogenized_stiffness(hom, ad.exp(v) * 30.0),
                              C_TARGET)

    err = ad.grad_check(f, x, step=1e-6, coords=8,
                        rng=np.random.default_rng(6))
    assert err < 1e-5
    assert time.perf_counter() - t0 < 120.0


def test_03b_strain_energy_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    prob = HyperelasticProblem(4, 4)
    loads = np.linspace(0.1, 0.5, 5)
    target = energy_target_curve(loads, 0.5)
    x = np.random.default_rng(7).normal(size=16) * 0.3

    def f(v):
        W = hyperelastic_energies(prob, ad.exp(v) * 10.0, loads)
        d = W - ad.constant(target)
        return ad.vmean(d * d)

    err = ad.grad_check(f, x, step=1e-6, coords=8,
                        rng=np.random.default_rng(8))
    assert err < 1e-5
    assert time.perf_counter() - t0 < 120.0


def test_03c_stress_path_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    prob = PlasticityProblem(4, 4)
    loads = np.linspace(5e-4, 1e-2, 12)
    rng = np.random.default_rng(9)
    xE = rng.normal(size=16) * 0.2
    xs = rng.normal(size=16) * 0.2
    E0, s00 = np.exp(xE) * 1e4, np.exp(xs) * 100.0

    hist = prob.solve(E0, s00, loads)
    trials = np.array([st.f_trial for st in hist.steps])
    assert np.any(trials > 0)                 # the path crosses yield
    smooth = prob.kink_free_elements(hist, s00)
    coords = rng.choice(smooth, size=min(5, smooth.size), replace=False)
    target = hist.sbar * 1.05

    def f(v):
        sb = plastic_stress_curve(prob, ad.exp(v) * 1e4,
                                  ad.constant(s00), loads)
        d = sb - ad.constant(target)
        return ad.vmean(d * d)

    err = ad.grad_check(f, xE, step=1e-7, coords=coords)
    assert err < 1e-4
    assert time.perf_counter() - t0 < 120.0


def test_03d_generator_to_stiffness_gradient_end_to_end():
    t0 = time.perf_counter()
    arch = nn.UnetArch(image_hw=8, base=4, mults=(1, 2), blocks=1,
                       attn_levels=(1,), heads=1, groups=4, time_dim=16)
    params = nn.init_params(arch, np.random.default_rng(10))
    schedule = df.linear_schedule(1000, 1e-4, 0.02)
    plan = df.ddim_plan(schedule.T, 10)
    eps_tape = nn.make_eps_tape_fn(arch, params)
    hom = Homogenizer(8, 8)
    w = np.random.default_rng(11).standard_normal((1, 1, 8, 8))

    def f(v):
        x0 = df.ddim_generate(eps_tape, schedule, v, plan)
        phase = project(ad.reshape(x0, (-1,)), 5.0)
        E = interpolate(ad.take_flat(phase, hom.mesh.pixel_of_elem),
                        1.0, 100.0)
        return stiffness_loss(homogenized_stiffness(hom, E), C_TARGET)

    err = ad.grad_check(f, w, step=1e-6, coords=5,
                        rng=np.random.default_rng(12))
    assert err < 1e-4
    assert time.perf_counter() - t0 < 120.0


def test_04_homogenization_reproduces_analytic_cells():
    hom = Homogenizer(8, 8)

    E0 = 7.0
    res = hom.solve(np.full(64, E0))
    C1 = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 0.35]])
    C1 *= E0 / (1.0 - 0.09)
    assert np.max(np.abs(res.C_hom - C1)) < 1e-10 * E0

    # two equal horizontal layers, E = 1 and 10, nu = 0.3: closed form
    E = np.where(np.arange(64) // 8 < 4, 10.0, 1.0)
    res = hom.solve(E)
    nu = 0.3
    f, Es = 0.5, (1.0, 10.0)
    # plane-stress laminate with layering normal along y
    c11 = [e / (1 - nu * nu) for e in Es]
    c12 = [nu * c for c in c11]
    c66 = [e / (2 * (1 + nu)) for e in Es]
    D = sum(f / c for c in c11)
    Bq = sum(f * (c12[i] / c11[i]) for i in range(2))
    Aq = sum(f * (c11[i] - c12[i] ** 2 / c11[i]) for i in range(2))
    C22h = 1.0 / D
    C12h = Bq / D
    C11h = Aq + Bq ** 2 / D
    C66h = 1.0 / sum(f / c for c in c66)
    want = np.array([[C11h, C12h, 0.0], [C12h, C22h, 0.0], [0.0, 0.0, C66h]])
    assert np.max(np.abs(res.C_hom - want)) < 1e-6

    E = np.exp(np.random.default_rng(13).normal(size=64))
    res = hom.solve(E)
    assert np.max(np.abs(res.C_hom - res.C_hom.T)) < 1e-8


def test_05_plastic_plateau_and_yield_surface_bound():
    E1, s0 = 1.0e5, 300.0
    prob = PlasticityProblem(1, 1, newton_rtol=1e-12, max_iter=400)
    loads = np.linspace(5e-4, 1e-2, 20)
    hist = prob.solve(np.array([E1]), np.array([s0]), loads)
    want = np.minimum(E1 * loads, s0)
    assert np.max(np.abs(hist.sbar - want)) < 1e-8 * s0

    def vm(sig):
        sx, sy, sxy, sz = sig[..., 0], sig[..., 1], sig[..., 2], sig[..., 3]
        return np.sqrt(0.5 * ((sx - sy) ** 2 + (sy - sz) ** 2
                              + (sz - sx) ** 2) + 3.0 * sxy ** 2)

    for st in hist.steps:
        assert np.all(vm(st.sig) <= s0 + 1e-9)

    # mixed field stays on or inside the yield surface too
    prob2 = PlasticityProblem(4, 4)
    rng = np.random.default_rng(14)
    E = np.exp(rng.normal(size=16) * 0.3) * 1e4
    s0f = np.exp(rng.normal(size=16) * 0.3) * 100.0
    hist2 = prob2.solve(E, s0f, loads)
    s0_qp = np.repeat(s0f, 4)
    for st in hist2.steps:
        assert np.all(vm(st.sig) <= s0_qp + 1e-9)


def test_06_deterministic_and_stochastic_sampler_limits(scalar_model):
    arch, params, schedule, _ = scalar_model
    plan = df.ddim_plan(schedule.T, 50)
    x_T = np.random.default_rng(15).standard_normal((32, 1))

    a = df.ddim_sample(nn.make_eps_fn(arch, params), schedule, x_T, plan)
    b = df.ddim_sample(nn.make_eps_fn(arch, params), schedule, x_T, plan)
    assert np.array_equal(a, b)               # eta = 0 is bitwise stable

    # consecutive-step eta = 1 update equals the ancestral step
    rng = np.random.default_rng(16)
    for t in (2, 17, 500, 1000):
        x = rng.standard_normal((8, 1))
        eps = rng.standard_normal((8, 1))
        z = rng.standard_normal((8, 1))
        ddim = df.ddim_step(schedule, x, t, t - 1, eps, 1.0, z)
        ddpm = df.ddpm_step(schedule, x, t, eps, z)
        assert np.max(np.abs(ddim - ddpm)) < 1e-10


def test_07_desk_scale_stiffness_design():
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    corpus = data.synth_toy_dataset(513, 16, rng)
    held_out, train_imgs = corpus[0], corpus[1:]
    dataset = data.grayscale_preprocess(train_imgs, rng=rng)[:, None]

    arch = nn.UnetArch(image_hw=16, base=8, mults=(1, 2, 4), blocks=1,
                       attn_levels=(1,), heads=1, groups=8, time_dim=32)
    params = nn.init_params(arch, np.random.default_rng(18))
    schedule = df.linear_schedule(1000, 1e-4, 0.02)
    cfg = df.TrainConfig(epochs=25, batch=32, lr=2e-3, optimizer="adamw",
                         lr_schedule="warmup-cosine", seed=19)
    result = df.train_denoiser(
        lambda pv, xv, t: nn.apply_denoiser(arch, pv, xv, t),
        params, schedule, dataset, cfg)
    assert result.epoch_losses[-1] < 0.7 * result.epoch_losses[0]

    # feasible self-consistent target: homogenize the held-out layout
    hom = Homogenizer(16, 16)
    phase_t = project_np(2.0 * held_out.reshape(-1) - 1.0, 80.0)
    E_t = 1.0 + 99.0 * phase_t[hom.mesh.pixel_of_elem]
    C_obj = hom.solve(E_t).C_hom

    plan = df.ddim_plan(schedule.T, 10)
    eps_tape = nn.make_eps_tape_fn(arch, result.params)

    def generator(wv):
        return df.ddim_generate(eps_tape, schedule, wv, plan)

    design = StiffnessDesign(generator, hom, C_obj, 1.0, 100.0)
    w0 = np.random.default_rng(20).standard_normal((1, 1, 16, 16))
    w, stages = multistage_optimize(design.objective, w0,
                                    gammas=(5.0, 10.0, 20.0, 80.0),
                                    iters_per_stage=60)

    initial = stages[0].result.losses[0]
    final = stages[-1].result.loss
    norm = float(np.sum(C_obj * C_obj))
    assert final <= 1e-2 * norm or final <= 0.1 * initial
    phase = project_np(generator(ad.constant(w.reshape(w0.shape)))
                       .data.reshape(-1), 80.0)
    assert binary_fraction(phase, 1e-3) >= 0.95
    assert time.perf_counter() - t0 < 1800.0


def test_08_projection_and_binarization_properties():
    assert project_np(0.0, 7.0) == 0.5
    x = np.linspace(-2.5, 2.5, 41)
    for g in (1.0, 5.0, 20.0):
        assert np.max(np.abs(project_np(-x, g) - (1 - project_np(x, g)))) \
            <= 1e-15

    x0 = np.random.default_rng(21).normal(size=200) * 0.5
    fracs = [binary_fraction(project_np(x0, g)) for g in (2, 5, 20, 80, 300)]
    assert all(b >= a - 1e-12 for a, b in zip(fracs, fracs[1:]))

    assert binary_fraction(np.array([0.0, 1.0, 0.5, 0.0005]), 1e-3) == 0.75
    assert binary_fraction(np.array([0.0, 1.0, 1.0, 0.0])) == 1.0
    assert binary_fraction(np.full(9, 0.5)) == 0.0


def test_09_forward_noising_statistics():
    schedule = df.linear_schedule(1000, 1e-4, 0.02)
    n = 100_000
    x0 = np.full((n, 1), 1.25)
    rng = np.random.default_rng(22)
    for t in (10, 500):
        eps = rng.standard_normal((n, 1))
        xt = df.forward_sample(schedule, x0, t, eps)[:, 0]
        abar = schedule.alpha_bar[t]
        mean_t, var_t = np.sqrt(abar) * 1.25, 1.0 - abar
        se_mean = np.sqrt(var_t / n)
        se_var = var_t * np.sqrt(2.0 / (n - 1))
        assert abs(xt.mean() - mean_t) <= 3 * se_mean
        assert abs(xt.var() - var_t) <= 3 * se_var


def test_10_target_curve_consistency():
    tc = TargetCurve(4.8e4, 2.7e-3, 220.0, (4.0, 1.0, 85.4),
                     (1000.0, 88.0, 88.0))
    assert tc.sigma0 == pytest.approx(129.6, abs=1e-12)
    assert tc.amp_sum == pytest.approx(90.4, rel=1e-12)
    assert tc.sig_inf - tc.sigma0 == pytest.approx(90.4, abs=1e-9)

    eps_y = 2.7e-3
    below = tc.values([eps_y])[0]
    above = tc.values([np.nextafter(eps_y, 1.0)])[0]
    assert abs(below - above) < 1e-12
    assert below == pytest.approx(129.6, abs=1e-12)
