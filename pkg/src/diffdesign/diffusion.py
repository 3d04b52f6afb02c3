"""Denoising diffusion: noise schedule, training objective, DDPM/DDIM samplers.

Time indexing is 1-based: schedule arrays have length T+1 with slot 0 holding
the boundary convention alpha_bar[0] = 1 (and hence beta_tilde[1] = 0), so the
final reverse step lands on a noise-free sample without special casing.

The deterministic DDIM sampler doubles as a generator: run on the tape with
the initial noise as a leaf, its backward pass gives exact gradients of any
sample functional with respect to that noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule and derived coefficients, index 0 is the t=0 boundary."""
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray  # variance of q(x_{t-1} | x_t, x_0)

    @property
    def T(self) -> int:
        return len(self.beta) - 1


def linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] = 1 gives alpha_bar[0] = 1
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha, alpha_bar, post)


def _per_sample(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a (B,) coefficient vector to broadcast over (B, ...) data."""
    return coef.reshape(coef.shape + (1,) * (ndim - 1))


def forward_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray):
    """Closed-form draw of x_t given x_0 and the injected noise."""
    t = np.asarray(t, dtype=int)
    ab = schedule.alpha_bar[t]
    if t.ndim:
        ab = _per_sample(ab, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(schedule: NoiseSchedule, x_prev: np.ndarray, t: int, eps: np.ndarray):
    """Single forward kernel q(x_t | x_{t-1})."""
    b = schedule.beta[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


# ------------------------------------------------------------------ training


def training_loss(eps_apply, params: dict, schedule: NoiseSchedule,
                  x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> Value:
    """Mean squared error between injected and predicted noise, on the tape.

    ``eps_apply(params, x, t) -> Value`` is the denoiser; ``params`` maps
    names to Values (the leaves receiving gradients).
    """
    xt = forward_sample(schedule, x0, t, eps)
    pred = eps_apply(params, ad.constant(xt), t)
    diff = pred - ad.constant(eps)
    return ad.vmean(diff * diff)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 128
    lr: float = 1e-4
    optimizer: str = "adam"           # "adam" | "adamw"
    weight_decay: float = 1e-4        # adamw only, applied to "/w" entries
    lr_schedule: str = "constant"     # "constant" | "warmup-cosine"
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    params: dict
    epoch_losses: list = field(default_factory=list)
    steps: int = 0


def train_denoiser(eps_apply, params: dict, schedule: NoiseSchedule,
                   dataset: np.ndarray, cfg: TrainConfig,
                   callback=None) -> TrainResult:
    """Optimize denoiser parameters on the standard noise-prediction objective.

    ``dataset`` is (N, ...) with sample layout matching the denoiser input.
    Aborts with TrainingDiverged if the loss goes non-finite.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(dataset)
    steps_per_epoch = (n + cfg.batch - 1) // cfg.batch
    total_steps = cfg.epochs * steps_per_epoch
    result = TrainResult(params)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for k0 in range(0, n, cfg.batch):
            batch = dataset[perm[k0:k0 + cfg.batch]]
            b = len(batch)
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal(batch.shape)
            leaves = {k: ad.leaf(v) for k, v in params.items()}
            loss = training_loss(eps_apply, leaves, schedule, batch, t, eps)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(loss)
            step += 1
            lr = _lr_at(cfg, step, total_steps)
            b1t = 1.0 - cfg.beta1 ** step
            b2t = 1.0 - cfg.beta2 ** step
            for k, leafv in leaves.items():
                g = leafv.grad
                if g is None:
                    continue
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v2[k] = cfg.beta2 * v2[k] + (1 - cfg.beta2) * g * g
                upd = (m[k] / b1t) / (np.sqrt(v2[k] / b2t) + cfg.adam_eps)
                if cfg.optimizer == "adamw" and k.endswith("/w"):
                    upd = upd + cfg.weight_decay * params[k]
                params[k] -= lr * upd
            epoch_loss += lval * b
        result.epoch_losses.append(epoch_loss / n)
        if callback is not None:
            callback(epoch, result.epoch_losses[-1])
    result.steps = step
    return result


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    warm = max(1, int(cfg.warmup_frac * total))
    if step <= warm:
        return cfg.lr * step / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))


# ------------------------------------------------------------------ samplers


def ddpm_step(schedule: NoiseSchedule, x, t: int, eps, z):
    """One ancestral reverse step; z is the injected standard normal draw."""
    a = schedule.alpha[t]
    ab = schedule.alpha_bar[t]
    mean = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
    return mean + np.sqrt(schedule.posterior_var[t]) * z


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    return eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)


def ddim_step(schedule: NoiseSchedule, x, t: int, t_prev: int, eps,
              eta: float = 0.0, z=None):
    """One DDIM update from time t to t_prev (works on arrays or Values)."""
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    x0_pred = (x - np.sqrt(1.0 - ab_t) * eps) * (1.0 / np.sqrt(ab_t))
    out = np.sqrt(ab_p) * x0_pred + np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps
    if sigma > 0.0:
        if z is None:
            raise ValueError("eta > 0 requires an injected noise draw")
        out = out + sigma * z
    return out


def ddim_plan(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced ascending subsequence of 1..T, always ending at T."""
    if not (1 <= steps <= T):
        raise ValueError("need 1 <= steps <= T")
    tau = np.unique(np.round(np.arange(1, steps + 1) * T / steps).astype(int))
    tau[-1] = T
    return tau


def ddpm_sample(eps_fn, schedule: NoiseSchedule, x_T: np.ndarray,
                rng: np.random.Generator | None = None, zs=None,
                record_traj: bool = False):
    """Full ancestral sampling chain from x_T; returns x_0 (and the trajectory).

    ``zs`` overrides the per-step noise (list indexed T..1 order); the t=1
    step uses no noise since the posterior variance vanishes there.
    """
    x = np.array(x_T, dtype=np.float64)
    traj = [x.copy()] if record_traj else None
    for i, t in enumerate(range(schedule.T, 0, -1)):
        eps = eps_fn(x, np.full(x.shape[0], t, dtype=int))
        if zs is not None:
            z = zs[i]
        elif schedule.posterior_var[t] > 0:
            z = rng.standard_normal(x.shape)
        else:
            z = np.zeros_like(x)
        x = ddpm_step(schedule, x, t, eps, z)
        if record_traj:
            traj.append(x.copy())
    return (x, traj) if record_traj else x


def ddim_sample(eps_fn, schedule: NoiseSchedule, x_T: np.ndarray,
                plan: np.ndarray, eta: float = 0.0,
                rng: np.random.Generator | None = None, zs=None,
                record_traj: bool = False):
    """DDIM chain over the given subsequence; deterministic at eta = 0."""
    x = np.array(x_T, dtype=np.float64)
    traj = [x.copy()] if record_traj else None
    taus = list(plan)
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        t_prev = int(taus[i - 1]) if i > 0 else 0
        eps = eps_fn(x, np.full(x.shape[0], t, dtype=int))
        z = None
        if eta > 0.0 and ddim_sigma(schedule, t, t_prev, eta) > 0.0:
            z = zs[len(taus) - 1 - i] if zs is not None else rng.standard_normal(x.shape)
        x = ddim_step(schedule, x, t, t_prev, eps, eta, z)
        if record_traj:
            traj.append(x.copy())
    return (x, traj) if record_traj else x


# ------------------------------------------------- differentiable generator


def ddim_generate(eps_apply_tape, schedule: NoiseSchedule, w: Value,
                  plan: np.ndarray, eta: float = 0.0, zs=None) -> Value:
    """Run the DDIM chain on the tape from the noise input ``w``.

    ``eps_apply_tape(x: Value, t: int array) -> Value`` closes over frozen
    network parameters. Injected noise draws (eta > 0) enter as constants, so
    gradients flow only through the deterministic part of each update.
    """
    x = w
    taus = list(plan)
    batch = w.data.shape[0]
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        t_prev = int(taus[i - 1]) if i > 0 else 0
        eps = eps_apply_tape(x, np.full(batch, t, dtype=int))
        z = None
        if eta > 0.0 and ddim_sigma(schedule, t, t_prev, eta) > 0.0:
            if zs is None:
                raise ValueError("eta > 0 on the tape requires explicit noise draws")
            z = ad.constant(zs[len(taus) - 1 - i])
        x = ddim_step(schedule, x, t, t_prev, eps, eta, z)
    return x


def generator_vjp(eps_apply_tape, schedule: NoiseSchedule, w: np.ndarray,
                  plan: np.ndarray, v_x0: np.ndarray, eta: float = 0.0, zs=None):
    """Pull a sample cotangent back to the generator's noise input.

    Returns (x0, v_w): the generated sample and v_x0^T dx0/dw.
    """
    w_leaf = ad.leaf(w)
    x0 = ddim_generate(eps_apply_tape, schedule, w_leaf, plan, eta=eta, zs=zs)
    ad.backward(x0, v_x0)
    return x0.data, w_leaf.grad
