"""DDPM noise schedule, forward noising, ancestral sampling and repaint conditioning."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep ``t = 0..T``; entry 0 is the clean-data convention (alpha_bar = 1)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self):
        return self.beta.shape[0] - 1

    def posterior_variance(self, t):
        return self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])


def make_schedule(steps=1000, beta_start=1e-4, beta_end=0.02):
    if steps < 1:
        raise ConfigError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.empty(steps + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar)


def scaled_schedule(steps):
    """Linear schedule whose beta range is stretched by ``1000 / steps``.

    Keeps the terminal alpha_bar close to the 1000-step default so short
    desk-scale chains still end near pure noise.
    """
    scale = 1000.0 / steps
    return make_schedule(steps, 1e-4 * scale, min(0.02 * scale, 0.999))


def _check_t(t, sched, lo=1):
    if not (lo <= t <= sched.steps):
        raise ValidationError(f"timestep {t} outside [{lo}, {sched.steps}]")


def forward_sample(x0, t, eps, sched):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` may be an integer or a per-sample integer array matching the
    leading axis of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValidationError(f"noise shape {eps.shape} does not match data {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.steps):
        raise ValidationError(f"timestep {t} outside [0, {sched.steps}]")
    ab = sched.alpha_bar[t_arr]
    if t_arr.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean_coefs(t, sched):
    """Coefficients of ``x_t`` and ``eps_hat`` in the reverse-step mean."""
    c_x = 1.0 / np.sqrt(sched.alpha[t])
    c_eps = -sched.beta[t] / (np.sqrt(1.0 - sched.alpha_bar[t]) * np.sqrt(sched.alpha[t]))
    return c_x, c_eps


def reverse_step(x_t, eps_hat, t, sched, rng):
    """One ancestral DDPM step ``x_t -> x_{t-1}``; noiseless at ``t = 1``."""
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    if t == 1:
        return mean
    sigma = np.sqrt(sched.posterior_variance(t))
    return mean + sigma * rng.standard_normal(x_t.shape)


def _denoise(denoiser, x, t):
    eps_hat = np.asarray(denoiser(x, t))
    if eps_hat.shape != x.shape:
        raise ValidationError(f"denoiser returned {eps_hat.shape}, expected {x.shape}")
    return eps_hat


def sample_loop(shape, denoiser, sched, rng):
    x = rng.standard_normal(shape)
    for t in range(sched.steps, 0, -1):
        x = reverse_step(x, _denoise(denoiser, x, t), t, sched, rng)
    return x


def repaint_step(x_prev_free, x0_known, known_mask, t, sched, rng):
    """Overwrite the known region of ``x_{t-1}`` with a forward-noised copy of ``x0_known``.

    At ``t - 1 = 0`` the known values are copied verbatim.
    """
    x_prev_free = np.asarray(x_prev_free, dtype=np.float64)
    x0_known = np.asarray(x0_known, dtype=np.float64)
    mask = np.asarray(known_mask)
    if not (x_prev_free.shape == x0_known.shape == np.broadcast_shapes(mask.shape, x0_known.shape)):
        raise ValidationError("repaint inputs must share one shape")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("known mask must be binary")
    _check_t(t, sched)
    known = mask.astype(bool)
    if t - 1 == 0:
        return np.where(known, x0_known, x_prev_free)
    noised = forward_sample(x0_known, t - 1, rng.standard_normal(x0_known.shape), sched)
    return np.where(known, noised, x_prev_free)


def repaint_loop(x0_known, known_mask, denoiser, sched, rng):
    """Sample with the known region re-imposed after every reverse step.

    An all-zero mask reduces to :func:`sample_loop` with the same draws.
    """
    x0_known = np.asarray(x0_known, dtype=np.float64)
    if not np.any(known_mask):
        return sample_loop(x0_known.shape, denoiser, sched, rng)
    x = rng.standard_normal(x0_known.shape)
    for t in range(sched.steps, 0, -1):
        free = reverse_step(x, _denoise(denoiser, x, t), t, sched, rng)
        x = repaint_step(free, x0_known, known_mask, t, sched, rng)
    return x
