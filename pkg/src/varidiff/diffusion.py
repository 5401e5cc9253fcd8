"""Forward process, v-parameterization, training loss, DDPM sampler, guidance.

The model predicts v = alpha*eps - sigma*x. Training minimizes the
squared error in eps-space, which equals the SNR-weighted squared error
in x-space. The sampler is ancestral DDPM whose per-step noise standard
deviation geometrically interpolates between the posterior stddev and
the forward transition stddev.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .schedule import ScheduleConfig, SchedulePoint, sampling_times, schedule_at
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 32
    variance_interp: float = 0.2  # eta: 1 -> posterior stddev, 0 -> transition stddev
    guidance: float = 0.0
    final_step_noise: bool = False

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (0.0 <= self.variance_interp <= 1.0):
            raise ValueError("variance_interp must lie in [0, 1]")
        if self.guidance < 0.0:
            raise ValueError("guidance must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    """Only the v-prediction / eps-space combination is supported."""

    parameterization: str = "v"
    loss_space: str = "epsilon"

    def __post_init__(self):
        if self.parameterization != "v" or self.loss_space != "epsilon":
            raise ValueError("only v-prediction with epsilon-space loss is enabled")


def forward_diffuse(x, sp: SchedulePoint, eps):
    """z_t = alpha_t * x + sigma_t * eps."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"x/eps shape mismatch: {x.shape} vs {eps.shape}")
    return sp.alpha * x + sp.sigma * eps


def v_target(x, eps, sp: SchedulePoint):
    """v = alpha_t * eps - sigma_t * x."""
    return sp.alpha * np.asarray(eps) - sp.sigma * np.asarray(x)


def predictions_from_v(z_t, v_hat, sp: SchedulePoint):
    """Recover (x_hat, eps_hat) from z_t and the v prediction."""
    z_t = np.asarray(z_t)
    v_hat = np.asarray(v_hat)
    x_hat = sp.alpha * z_t - sp.sigma * v_hat
    eps_hat = sp.sigma * z_t + sp.alpha * v_hat
    return x_hat, eps_hat


def diffusion_loss(x, context, model, schedule_cfg: ScheduleConfig, rng, rng_eps=None):
    """Train-step loss: mean squared error between eps and the model-implied eps.

    Draws per-item t ~ U(t_min_clip, t_max_clip) and eps ~ N(0, I), forms
    z_t, queries the model for v, converts to an eps prediction and
    returns mean ||eps - eps_hat||^2 as a scalar Tensor on the tape.
    """
    x = np.asarray(x)
    if rng_eps is None:
        rng_eps = rng
    batch = x.shape[0]
    t = rng.uniform(schedule_cfg.t_min_clip, schedule_cfg.t_max_clip, size=batch)
    eps = rng_eps.standard_normal(x.shape).astype(x.dtype)
    return loss_given(x, t, eps, context, model, schedule_cfg)


def loss_given(x, t, eps, context, model, schedule_cfg: ScheduleConfig):
    """The loss at fixed (t, eps); split out so tests can pin the draw."""
    x = np.asarray(x)
    t = np.asarray(t, dtype=np.float64)
    alpha, sigma = _alpha_sigma_batch(schedule_cfg, t, x.dtype)
    bshape = (x.shape[0],) + (1,) * (x.ndim - 1)
    a = alpha.reshape(bshape)
    s = sigma.reshape(bshape)
    z_t = a * x + s * eps
    v_hat = model(z_t, t, context)
    if not isinstance(v_hat, Tensor):
        v_hat = T.as_tensor(v_hat)
    # eps_hat = sigma * z_t + alpha * v_hat
    eps_hat = T.add(Tensor(s * z_t), T.mul(v_hat, Tensor(a)))
    diff = T.sub(Tensor(eps), eps_hat)
    loss = T.mean(T.mul(diff, diff))
    if not np.isfinite(loss.data):
        raise NonFiniteError("diffusion loss is not finite")
    return loss


def ddpm_step(
    z_t,
    v_hat,
    sp_t: SchedulePoint,
    sp_s: SchedulePoint,
    cfg: SamplerConfig,
    rng,
    final_step=False,
):
    """One ancestral step from time t down to time s < t.

    Posterior mean uses x_hat from the v prediction; the noise stddev is
    sigma_low^eta * sigma_high^(1-eta) with sigma_low the posterior
    stddev and sigma_high the forward transition stddev. The final step
    down to the schedule floor adds no noise unless final_step_noise.
    """
    if not sp_s.t < sp_t.t:
        raise ValueError(f"expected s < t, got s={sp_s.t} t={sp_t.t}")
    z_t = np.asarray(z_t)
    x_hat, _ = predictions_from_v(z_t, v_hat, sp_t)
    alpha_ts = sp_t.alpha / sp_s.alpha
    var_ts = max(sp_t.sigma**2 - alpha_ts**2 * sp_s.sigma**2, 0.0)
    mu = (alpha_ts * sp_s.sigma**2 / sp_t.sigma**2) * z_t + (
        sp_s.alpha * var_ts / sp_t.sigma**2
    ) * x_hat
    if final_step and not cfg.final_step_noise:
        return mu.astype(z_t.dtype)
    stddev = step_stddev(sp_t, sp_s, cfg.variance_interp)
    if stddev == 0.0:
        return mu.astype(z_t.dtype)
    noise = rng.standard_normal(z_t.shape).astype(z_t.dtype)
    return (mu + stddev * noise).astype(z_t.dtype)


def step_stddev(sp_t: SchedulePoint, sp_s: SchedulePoint, eta: float) -> float:
    """Geometric interpolation between posterior and transition stddevs."""
    alpha_ts = sp_t.alpha / sp_s.alpha
    var_ts = max(sp_t.sigma**2 - alpha_ts**2 * sp_s.sigma**2, 0.0)
    sigma_ts = np.sqrt(var_ts)
    sigma_low = sigma_ts * sp_s.sigma / sp_t.sigma  # posterior stddev
    sigma_high = sigma_ts  # transition stddev
    if sigma_low == 0.0 or sigma_high == 0.0:
        return 0.0 if eta == 1.0 else float(sigma_low**eta * sigma_high ** (1.0 - eta))
    return float(sigma_low**eta * sigma_high ** (1.0 - eta))


def guided_v(v_cond, v_uncond, g: float):
    """Classifier-free guidance: v_cond + g * (v_cond - v_uncond); g=0 is conditional."""
    if g < 0.0:
        raise ValueError("guidance must be >= 0")
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ValueError("guided_v shape mismatch")
    return v_cond + g * (v_cond - v_uncond)


def sample(model, context, cfg: SamplerConfig, schedule_cfg: ScheduleConfig, shape, rng):
    """Generate one batch by iterating ddpm_step over the uniform time grid.

    model(z_t, t, context) must return the v prediction. When guidance > 0
    and a context is given, the model is evaluated a second time with a
    null context and the two predictions are extrapolated with guided_v.
    """
    times = sampling_times(schedule_cfg, cfg.num_steps)
    z = rng.standard_normal(shape).astype(np.float32)
    for i in range(cfg.num_steps):
        sp_t = schedule_at(schedule_cfg, times[i])
        sp_s = schedule_at(schedule_cfg, times[i + 1])
        t_vec = np.full(shape[0], sp_t.t)
        with T.no_grad():
            v = _as_array(model(z, t_vec, context))
            if cfg.guidance > 0.0 and context is not None:
                v_uncond = _as_array(model(z, t_vec, None))
                v = guided_v(v, v_uncond, cfg.guidance)
        z = ddpm_step(z, v, sp_t, sp_s, cfg, rng, final_step=(i == cfg.num_steps - 1))
    return z


def snr_weighted_x_loss(x, x_hat, sp: SchedulePoint):
    """SNR(t) * ||x - x_hat||^2, the x-space form of the eps-space loss."""
    d = np.asarray(x) - np.asarray(x_hat)
    return sp.snr * float(np.sum(d * d))


def eps_loss(eps, eps_hat):
    d = np.asarray(eps) - np.asarray(eps_hat)
    return float(np.sum(d * d))


def _alpha_sigma_batch(cfg: ScheduleConfig, t, dtype):
    alphas = np.empty(len(t), dtype=np.float64)
    sigmas = np.empty(len(t), dtype=np.float64)
    for i, ti in enumerate(t):
        sp = schedule_at(cfg, float(ti))
        alphas[i] = sp.alpha
        sigmas[i] = sp.sigma
    return alphas.astype(dtype), sigmas.astype(dtype)


def _as_array(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v)
