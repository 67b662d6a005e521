"""Cosine noise schedule, v-parameterization algebra, and the DDPM sampler.

All coefficient tables are float64 numpy indexed by integer timestep t in
[0, T]. The array ops are plain scalar-times-array arithmetic, so they work on
numpy arrays and torch tensors alike; the sampler drives an opaque model
callable and owns all of its randomness through one seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients; index 0 is the clean endpoint (alpha_bar = 1)."""

    num_steps: int
    alpha: np.ndarray        # (T+1,), alpha[0] = 1
    alpha_bar: np.ndarray    # (T+1,), cumulative product of alpha
    beta: np.ndarray         # (T+1,), 1 - alpha
    sigma: np.ndarray        # (T+1,), sqrt(1 - alpha_bar)
    sigma_tilde: np.ndarray  # (T+1,), posterior std; exactly 0 at t <= 1

    def __post_init__(self):
        T = self.num_steps
        for name in ("alpha", "alpha_bar", "beta", "sigma", "sigma_tilde"):
            if getattr(self, name).shape != (T + 1,):
                raise ValueError(f"{name} must have shape ({T + 1},)")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")
        return t


def cosine_schedule(num_steps: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine alpha_bar schedule with per-step beta clipped to max_beta.

    alpha_bar is rebuilt as the cumulative product of the clipped alphas so the
    identity alpha_bar[t] = alpha_bar[t-1] * alpha[t] holds exactly.
    """
    if num_steps < 1:
        raise ValueError("schedule needs at least one step")
    t = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((t / num_steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    bar = f / f[0]
    beta = np.zeros(num_steps + 1)
    beta[1:] = np.minimum(1.0 - bar[1:] / bar[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    sigma_tilde = np.zeros(num_steps + 1)
    # posterior std: sqrt(((1 - ab[t-1]) / (1 - ab[t])) * beta[t]); 0 at t = 1
    sigma_tilde[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
    return NoiseSchedule(num_steps=num_steps, alpha=alpha, alpha_bar=alpha_bar,
                         beta=beta, sigma=sigma, sigma_tilde=sigma_tilde)


@dataclass
class DiffusionSample:
    """One diffused training pair: noisy input x_t and the v target at step t."""

    x_t: object
    v: object
    t: int

    def __post_init__(self):
        if getattr(self.x_t, "shape", None) != getattr(self.v, "shape", None):
            raise ValueError("x_t and v must share a shape")
        if self.t < 1:
            raise ValueError("diffusion samples live at t >= 1")


def make_sample(x0, eps, t: int, schedule: NoiseSchedule) -> DiffusionSample:
    """Diffuse x0 with noise eps to step t and compute the v target.

    x_t = sqrt(ab) x0 + sqrt(1-ab) eps;  v = sqrt(ab) eps - sqrt(1-ab) x0.
    """
    t = schedule.check_t(t)
    a = math.sqrt(schedule.alpha_bar[t])
    b = math.sqrt(1.0 - schedule.alpha_bar[t])
    return DiffusionSample(x_t=a * x0 + b * eps, v=a * eps - b * x0, t=t)


def recover_from_v(x_t, v, t: int, schedule: NoiseSchedule):
    """Invert the (x0, eps) -> (x_t, v) rotation: returns (x0, eps)."""
    t = schedule.check_t(t)
    a = math.sqrt(schedule.alpha_bar[t])
    b = math.sqrt(1.0 - schedule.alpha_bar[t])
    return a * x_t - b * v, b * x_t + a * v


def min_snr_weight(t: int, schedule: NoiseSchedule, gamma: float = 5.0) -> float:
    """Loss weight min(SNR_t, gamma) / (SNR_t + 1); t = 0 has no finite SNR."""
    t = schedule.check_t(t)
    snr = schedule.alpha_bar[t] / (1.0 - schedule.alpha_bar[t])
    return float(min(snr, gamma) / (snr + 1.0))


def ddpm_step(x_t, v_hat, t: int, schedule: NoiseSchedule, noise=None):
    """One reverse step from t to t-1 given the model's v estimate.

    eps_hat = sigma_t x_t + sqrt(ab_t) v_hat;
    x_{t-1} = (x_t - (beta_t / sigma_t) eps_hat) / sqrt(alpha_t) + sigma_tilde_t * noise.
    The t = 1 step is deterministic.
    """
    t = schedule.check_t(t)
    eps_hat = schedule.sigma[t] * x_t + math.sqrt(schedule.alpha_bar[t]) * v_hat
    mean = (x_t - (schedule.beta[t] / schedule.sigma[t]) * eps_hat) / math.sqrt(schedule.alpha[t])
    if t == 1 or noise is None:
        return mean
    return mean + schedule.sigma_tilde[t] * noise


def sample_loop(model, shape, schedule: NoiseSchedule, seed: int,
                condition=None, cfg_scale: float = 1.0, clamp: bool = True) -> np.ndarray:
    """Draw one sample by iterating the reverse chain from pure noise.

    model(x, t, condition) -> v_hat; condition None selects the unconditional
    branch. cfg_scale != 1 with a condition runs classifier-free guidance:
    v = v_uncond + cfg_scale * (v_cond - v_uncond). Fixed seed gives
    bitwise-identical output.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    for t in range(schedule.num_steps, 0, -1):
        if condition is None or cfg_scale == 1.0:
            v = model(x, t, condition)
        else:
            v_cond = model(x, t, condition)
            v_uncond = model(x, t, None)
            v = v_uncond + cfg_scale * (v_cond - v_uncond)
        noise = rng.standard_normal(shape).astype(np.float32) if t > 1 else None
        x = np.asarray(ddpm_step(x, v, t, schedule, noise), dtype=np.float32)
    if clamp:
        np.clip(x, -1.0, 1.0, out=x)
    return x
