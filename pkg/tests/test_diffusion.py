"""Diffusion process: schedule identities, sampler equivalences, generator VJP."""

import numpy as np
import pytest

from diffdesign import autodiff as ad
from diffdesign import diffusion as df
from diffdesign import nn


def test_schedule_invariants():
    s = df.linear_schedule(1000, 1e-4, 0.02)
    assert s.T == 1000
    assert s.alpha_bar[0] == 1.0
    assert s.beta[1] == 1e-4 and s.beta[-1] == 0.02
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert s.posterior_var[1] == 0.0  # boundary convention alpha_bar[0] = 1
    assert np.all(s.posterior_var[2:] > 0)
    # posterior variance is below the forward variance
    assert np.all(s.posterior_var[1:] <= s.beta[1:] + 1e-15)


def test_schedule_validation():
    with pytest.raises(ValueError):
        df.linear_schedule(0)
    with pytest.raises(ValueError):
        df.linear_schedule(10, 0.5, 0.1)
    with pytest.raises(ValueError):
        df.linear_schedule(10, 0.0, 0.1)


def test_forward_marginal_composition_oracle():
    # composing single-step kernels must reproduce the closed-form marginal:
    # mean coefficient prod sqrt(alpha), variance v_t = alpha_t v_{t-1} + beta_t
    s = df.linear_schedule(200, 1e-3, 0.05)
    coef, var = 1.0, 0.0
    for t in range(1, 201):
        coef *= np.sqrt(s.alpha[t])
        var = s.alpha[t] * var + s.beta[t]
        assert abs(coef - np.sqrt(s.alpha_bar[t])) < 1e-13
        assert abs(var - (1.0 - s.alpha_bar[t])) < 1e-13


def test_forward_sample_statistics():
    s = df.linear_schedule()
    rng = np.random.default_rng(0)
    x0 = np.full(40_000, 1.7)
    for t in (10, 500):
        eps = rng.standard_normal(x0.shape)
        xt = df.forward_sample(s, x0, t, eps)
        m_true = np.sqrt(s.alpha_bar[t]) * 1.7
        v_true = 1.0 - s.alpha_bar[t]
        n = len(x0)
        se_mean = np.sqrt(v_true / n)
        se_var = v_true * np.sqrt(2.0 / (n - 1))
        assert abs(xt.mean() - m_true) < 4 * se_mean
        assert abs(xt.var() - v_true) < 4 * se_var


def test_forward_sample_per_sample_t():
    s = df.linear_schedule(100)
    x0 = np.ones((4, 2))
    eps = np.zeros((4, 2))
    t = np.array([1, 10, 50, 100])
    xt = df.forward_sample(s, x0, t, eps)
    assert np.allclose(xt, np.sqrt(s.alpha_bar[t])[:, None])


def test_ddim_plan():
    tau = df.ddim_plan(1000, 50)
    assert tau[-1] == 1000 and len(tau) == 50
    assert np.all(np.diff(tau) > 0)
    assert np.array_equal(df.ddim_plan(10, 10), np.arange(1, 11))
    with pytest.raises(ValueError):
        df.ddim_plan(10, 11)


def test_ddim_eta1_consecutive_equals_ddpm():
    # with shared noise draws and the same network, DDIM(eta=1) over 1..T
    # reproduces the ancestral sampler step for step
    T = 40
    s = df.linear_schedule(T, 1e-3, 0.05)
    rng = np.random.default_rng(1)
    arch = nn.MlpArch(hidden=8, time_dim=4)
    p = nn.init_mlp(arch, rng)
    p["fc3/w"] = rng.standard_normal((8, 1)) * 0.5
    fn = nn.make_eps_fn(arch, p)
    x_T = rng.standard_normal((6, 1))
    zs = [rng.standard_normal((6, 1)) for _ in range(T)]
    a, traj_a = df.ddpm_sample(fn, s, x_T, zs=zs, record_traj=True)
    b, traj_b = df.ddim_sample(fn, s, x_T, df.ddim_plan(T, T), eta=1.0,
                               zs=zs, record_traj=True)
    for xa, xb in zip(traj_a, traj_b):
        assert np.max(np.abs(xa - xb)) < 1e-10
    assert np.max(np.abs(a - b)) < 1e-10


def test_ddim_deterministic_bitwise():
    s = df.linear_schedule(100)
    rng = np.random.default_rng(2)
    arch = nn.MlpArch(hidden=8, time_dim=4)
    p = nn.init_mlp(arch, rng)
    p["fc3/w"] = rng.standard_normal((8, 1))
    fn = nn.make_eps_fn(arch, p)
    x_T = rng.standard_normal((3, 1))
    plan = df.ddim_plan(100, 10)
    a = df.ddim_sample(fn, s, x_T, plan, eta=0.0)
    b = df.ddim_sample(fn, s, x_T, plan, eta=0.0)
    assert np.array_equal(a, b)


def test_ddim_zero_network_closed_form():
    # eps == 0 collapses every update to x * sqrt(ab_prev/ab_t): x0 = x_T/sqrt(ab_T)
    s = df.linear_schedule(100)
    fn = lambda x, t: np.zeros_like(x)
    x_T = np.array([[0.3], [-1.1]])
    out = df.ddim_sample(fn, s, x_T, df.ddim_plan(100, 7))
    assert np.allclose(out, x_T / np.sqrt(s.alpha_bar[100]), atol=1e-12)


def test_eta_positive_requires_noise():
    s = df.linear_schedule(10)
    with pytest.raises(ValueError):
        df.ddim_step(s, np.ones((1, 1)), 5, 4, np.zeros((1, 1)), eta=1.0, z=None)


def test_generator_vjp_matches_fd():
    s = df.linear_schedule(50, 1e-3, 0.04)
    rng = np.random.default_rng(3)
    arch = nn.MlpArch(hidden=8, time_dim=4)
    p = nn.init_mlp(arch, rng)
    p["fc3/w"] = rng.standard_normal((8, 1)) * 0.4
    tape_fn = nn.make_eps_tape_fn(arch, p)
    plan = df.ddim_plan(50, 5)

    def f(w):
        x0 = df.ddim_generate(tape_fn, s, w, plan)
        return ad.vsum(x0 * x0)

    err = ad.grad_check(f, rng.standard_normal((3, 1)), step=1e-6)
    assert err < 1e-5


def test_generator_vjp_linearity_and_determinism():
    s = df.linear_schedule(30, 1e-3, 0.04)
    rng = np.random.default_rng(4)
    arch = nn.MlpArch(hidden=8, time_dim=4)
    p = nn.init_mlp(arch, rng)
    p["fc3/w"] = rng.standard_normal((8, 1)) * 0.4
    tape_fn = nn.make_eps_tape_fn(arch, p)
    plan = df.ddim_plan(30, 6)
    w = rng.standard_normal((2, 1))
    v1 = rng.standard_normal((2, 1))
    v2 = rng.standard_normal((2, 1))
    x0a, g1 = df.generator_vjp(tape_fn, s, w, plan, v1)
    x0b, g2 = df.generator_vjp(tape_fn, s, w, plan, v2)
    _, g12 = df.generator_vjp(tape_fn, s, w, plan, 2.0 * v1 - 3.0 * v2)
    assert np.array_equal(x0a, x0b)
    assert np.allclose(g12, 2.0 * g1 - 3.0 * g2, rtol=1e-12, atol=1e-14)
    _, g1_again = df.generator_vjp(tape_fn, s, w, plan, v1)
    assert np.array_equal(g1, g1_again)


def test_training_smoke_loss_decreases():
    from diffdesign import data
    rng = np.random.default_rng(5)
    x = data.gmm_sample(data.GmmSpec(), 2000, rng).reshape(-1, 1)
    s = df.linear_schedule(200, 1e-3, 0.05)
    arch = nn.MlpArch(hidden=32, time_dim=16)
    params = nn.init_mlp(arch, np.random.default_rng(6))
    cfg = df.TrainConfig(epochs=30, batch=128, lr=1e-3, seed=7)
    res = df.train_denoiser(
        lambda pv, xv, t: nn.apply_mlp(arch, pv, xv, t), params, s, x, cfg)
    first = np.mean(res.epoch_losses[:3])
    last = np.mean(res.epoch_losses[-3:])
    assert last < 0.6 * first
    assert res.steps == 30 * 16


def test_training_aborts_on_nonfinite():
    s = df.linear_schedule(50)
    arch = nn.MlpArch(hidden=8, time_dim=4)
    params = nn.init_mlp(arch, np.random.default_rng(8))
    bad = np.full((64, 1), np.nan)
    with pytest.raises(df.TrainingDiverged, match="epoch 0"):
        df.train_denoiser(lambda pv, xv, t: nn.apply_mlp(arch, pv, xv, t),
                          params, s, bad, df.TrainConfig(epochs=1, batch=64))


def test_warmup_cosine_schedule_shape():
    cfg = df.TrainConfig(lr=1e-3, lr_schedule="warmup-cosine", warmup_frac=0.1)
    total = 100
    lrs = [df._lr_at(cfg, k, total) for k in range(1, total + 1)]
    assert lrs[9] == pytest.approx(1e-3)      # end of warmup
    assert lrs[0] == pytest.approx(1e-4)      # linear ramp start
    assert lrs[-1] < 1e-6                      # cosine decays to ~0
    assert max(lrs) <= 1e-3 + 1e-15
