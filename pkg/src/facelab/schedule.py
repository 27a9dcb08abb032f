"""Variance-preserving noise schedules.

A schedule holds per-timestep coefficients (alpha_t, sigma_t) for the
marginal x_t = alpha_t * x_0 + sigma_t * eps with alpha_t^2 + sigma_t^2 = 1.
Index 0 is clean data (alpha_0 = 1, sigma_0 = 0); index T is near-noise
(alpha_T <= 0.05 so x_T is statistically indistinguishable from white noise
at desk scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

# Continuous-time beta-linear endpoints; scaled by 1/T they reproduce the
# classic discrete (1e-4, 0.02) range at T=1000.
BETA_MIN = 0.1
BETA_MAX = 20.0


class ScheduleError(ValueError):
    """Constructed schedule violates a variance-preserving invariant."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    timesteps: int
    alpha: np.ndarray  # (T+1,) signal coefficients, alpha[0] = 1
    sigma: np.ndarray  # (T+1,) noise coefficients, sigma[0] = 0

    @property
    def T(self) -> int:
        return self.timesteps

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal variance alpha_t^2."""
        return float(self.alpha[t]) ** 2

    def validate(self) -> None:
        a, s = self.alpha, self.sigma
        if len(a) != self.timesteps + 1 or len(s) != self.timesteps + 1:
            raise ScheduleError("coefficient arrays must have length T+1")
        if a[0] != 1.0 or s[0] != 0.0:
            raise ScheduleError("schedule must start at alpha_0=1, sigma_0=0")
        if a[-1] > 0.05:
            raise ScheduleError(f"alpha_T={a[-1]:.4g} > 0.05; terminal state too clean")
        vp = np.abs(a**2 + s**2 - 1.0)
        if vp.max() > 1e-12:
            raise ScheduleError(f"variance-preserving constraint violated by {vp.max():.3g}")
        if not np.all(np.diff(a) < 0):
            raise ScheduleError("alpha must be strictly decreasing")
        if not np.all(np.diff(s) > 0):
            raise ScheduleError("sigma must be strictly increasing")


def build_schedule(timesteps: int, kind: str = "linear") -> NoiseSchedule:
    """Construct and validate a VP schedule with T steps.

    "linear" is beta-linear: discrete per-step betas interpolate
    (BETA_MIN/T, BETA_MAX/T) and alpha_t = sqrt(prod(1 - beta_i)).
    "cosine" sets alpha_t = cos(pi/2 * 0.98 * t/T), slightly shortened so
    alpha_T stays positive.
    """
    if timesteps < 2:
        raise ScheduleError("need at least 2 timesteps")
    if kind == "linear":
        beta = np.linspace(BETA_MIN / timesteps, min(BETA_MAX / timesteps, 0.999), timesteps)
        alpha_bar = np.cumprod(1.0 - beta)
        alpha = np.concatenate([[1.0], np.sqrt(alpha_bar)])
    elif kind == "cosine":
        t = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        alpha = np.cos(0.5 * np.pi * 0.98 * t)
        alpha[0] = 1.0
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    sigma = np.sqrt(np.maximum(0.0, 1.0 - alpha**2))
    sched = NoiseSchedule(kind=kind, timesteps=timesteps, alpha=alpha, sigma=sigma)
    sched.validate()
    return sched
