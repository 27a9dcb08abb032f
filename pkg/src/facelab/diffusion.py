"""Forward/reverse diffusion kernels and ancestral sampling.

All kernel arithmetic is float64 numpy; the network boundary casts to the
net's dtype. Sampling is deterministic given the configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import images
from .denoiser import Denoiser
from .rngs import stream
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    """Ancestral sampling settings.

    steps may be smaller than the schedule's T, in which case the sampler
    walks a strided timestep subsequence using the generalized posterior.
    """

    height: int = 32
    width: int = 32
    channels: int = 1
    steps: int = 60
    guidance_scale: float = 2.0
    condition: str = "faces1"
    negative_condition: str = "degraded"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = alpha_t * x0 + sigma_t * eps."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    x0 = images.as_image(x0)
    eps = images.as_image(eps)
    if eps.shape != x0.shape:
        raise ValueError("noise shape must match image shape")
    return schedule.alpha[t] * x0 + schedule.sigma[t] * eps


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward kernel: (x_t - sqrt(1 - alpha_t^2) * eps_hat) / alpha_t."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    a = schedule.alpha[t]
    if a < 1e-6:
        raise FloatingPointError(f"alpha_{t}={a:.3g} too small to invert")
    sigma = np.sqrt(1.0 - a * a)
    return (images.as_image(x_t) - sigma * images.as_image(eps_hat)) / a


def posterior_coeffs(schedule: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float, float]:
    """(signal ratio r, transition variance, posterior variance) for t -> t_prev.

    r = alpha_t / alpha_prev; the transition kernel q(x_t | x_prev) has
    variance sigma_t^2 - r^2 sigma_prev^2, and the posterior
    q(x_prev | x_t, x0) has variance (transition var) * sigma_prev^2 / sigma_t^2.
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    a_t, s_t = schedule.alpha[t], schedule.sigma[t]
    a_p, s_p = schedule.alpha[t_prev], schedule.sigma[t_prev]
    r = a_t / a_p
    var_step = s_t**2 - r**2 * s_p**2
    var_post = var_step * (s_p**2 / s_t**2)
    return float(r), float(var_step), float(var_post)


def posterior_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw x_{t_prev} from the eps-parameterized reverse kernel.

    The mean is (x_t - (var_step / sigma_t) * eps_hat) / r; the noise term
    vanishes identically when sigma_prev = 0, so the final step is
    deterministic and equals the predicted clean image.
    """
    r, var_step, var_post = posterior_coeffs(schedule, t, t_prev)
    s_t = schedule.sigma[t]
    x_t = images.as_image(x_t)
    eps_hat = images.as_image(eps_hat)
    mean = (x_t - (var_step / s_t) * eps_hat) / r
    if var_post > 0.0:
        mean = mean + np.sqrt(var_post) * rng.standard_normal(x_t.shape)
    return mean


def ancestral_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Single adjacent reverse step t -> t-1."""
    if t < 1:
        raise ValueError("ancestral step requires t >= 1")
    return posterior_step(x_t, t, t - 1, eps_hat, schedule, rng)


def cfg_epsilon(dm: Denoiser, x_t: np.ndarray, t: int, cond_id: int, neg_cond_id: int, w: float) -> np.ndarray:
    """Classifier-free-guided prediction eps_neg + w * (eps_cond - eps_neg).

    The endpoints w=1 and w=0 return the single-branch predictions exactly
    (and skip the unused network evaluation).
    """
    for cid in (cond_id, neg_cond_id):
        if not 0 <= cid < len(dm.vocab.names):
            raise KeyError(f"unknown condition id {cid}")
    if w == 1.0:
        return dm.predict(x_t, t, cond_id)
    if w == 0.0:
        return dm.predict(x_t, t, neg_cond_id)
    both = dm.predict_batch(np.stack([x_t, x_t]), np.full(2, t), np.array([cond_id, neg_cond_id]))
    eps_c, eps_n = both[0], both[1]
    return eps_n + w * (eps_c - eps_n)


def timestep_grid(T: int, steps: int) -> list[int]:
    """Strictly decreasing timesteps from T to 0 with `steps` transitions."""
    if steps > T:
        raise ValueError(f"steps={steps} exceeds schedule T={T}")
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return list(ts[::-1])


def sample(dm: Denoiser, config: SamplerConfig, schedule: NoiseSchedule) -> np.ndarray:
    """Generate one image by ancestral sampling; clipped to [0,1] at the end."""
    return _sample_loop(dm, config, schedule, guidance_fn=None)


def _sample_loop(dm: Denoiser, config: SamplerConfig, schedule: NoiseSchedule, guidance_fn) -> np.ndarray:
    """Shared core for plain and guided sampling.

    guidance_fn(x_t, t, eps_hat) -> adjusted eps_hat, or None for no guidance.
    """
    if not dm.is_trained:
        raise RuntimeError("denoiser has no training steps recorded")
    rng = stream(config.seed, "sample")
    cond = dm.vocab.id_of(config.condition)
    neg = dm.vocab.id_of(config.negative_condition)
    shape = (config.height, config.width, config.channels)
    x = rng.standard_normal(shape)
    grid = timestep_grid(schedule.T, config.steps)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        eps_hat = cfg_epsilon(dm, x, t, cond, neg, config.guidance_scale)
        if guidance_fn is not None:
            eps_hat = guidance_fn(x, t, eps_hat)
        x = posterior_step(x, t, t_prev, eps_hat, schedule, rng)
    return images.clip01(x)


def sample_many(dm: Denoiser, config: SamplerConfig, schedule: NoiseSchedule, n: int, batch_size: int = 64) -> list[np.ndarray]:
    """Batched sampling of n images.

    Image i uses the rng stream derived from (config.seed, i), independent of
    the batch layout, so reruns with a different batch_size reuse the same
    noise draws. Network evaluations are batched for speed.
    """
    if not dm.is_trained:
        raise RuntimeError("denoiser has no training steps recorded")
    cond = dm.vocab.id_of(config.condition)
    neg = dm.vocab.id_of(config.negative_condition)
    shape = (config.height, config.width, config.channels)
    grid = timestep_grid(schedule.T, config.steps)
    out: list[np.ndarray] = []
    for start in range(0, n, batch_size):
        count = min(batch_size, n - start)
        rngs = [stream(config.seed, "sample", start + i) for i in range(count)]
        x = np.stack([r.standard_normal(shape) for r in rngs])
        for t, t_prev in zip(grid[:-1], grid[1:]):
            eps_hat = _cfg_epsilon_batch(dm, x, t, cond, neg, config.guidance_scale)
            r_sig, var_step, var_post = posterior_coeffs(schedule, t, t_prev)
            s_t = schedule.sigma[t]
            x = (x - (var_step / s_t) * eps_hat) / r_sig
            if var_post > 0.0:
                x = x + np.sqrt(var_post) * np.stack([r.standard_normal(shape) for r in rngs])
        out.extend(images.clip01(xi) for xi in x)
    return out


def _cfg_epsilon_batch(dm: Denoiser, x: np.ndarray, t: int, cond: int, neg: int, w: float) -> np.ndarray:
    n = x.shape[0]
    if w == 1.0:
        return dm.predict_batch(x, np.full(n, t), np.full(n, cond))
    if w == 0.0:
        return dm.predict_batch(x, np.full(n, t), np.full(n, neg))
    stacked = dm.predict_batch(
        np.concatenate([x, x]),
        np.full(2 * n, t),
        np.concatenate([np.full(n, cond), np.full(n, neg)]),
    )
    eps_c, eps_n = stacked[:n], stacked[n:]
    return eps_n + w * (eps_c - eps_n)
