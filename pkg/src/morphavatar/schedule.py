"""Noise schedules and DDIM stepping.

A schedule stores cumulative signal levels ``alpha_bar[0..T]`` with index 0
the clean-data end (``alpha_bar[0] == 1``) and values strictly decreasing in
t. The SNR of index t is ``alpha_bar/(1 - alpha_bar)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # (T+1,)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.shape[0] < 2:
            raise ScheduleError("schedule needs at least two entries")
        if not (0.99 < ab[0] <= 1.0):
            raise ScheduleError(f"alpha_bar[0] = {ab[0]} not near 1")
        if np.any(np.diff(ab) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if ab[-1] < 0:
            raise ScheduleError("alpha_bar must be non-negative")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def steps(self) -> int:
        return self.alpha_bar.shape[0] - 1


def scaled_linear_betas(steps: int) -> np.ndarray:
    """Per-step noise rates, linear in sqrt(beta); endpoints scale with 1/T so
    the terminal signal level is roughly T-independent."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    b0 = 0.00085 * (1000.0 / steps)
    b1 = 0.012 * (1000.0 / steps)
    if steps == 1:
        betas = np.array([(b0 + b1) / 2.0])
    else:
        betas = np.linspace(np.sqrt(b0), np.sqrt(b1), steps) ** 2
    return np.clip(betas, 0.0, 0.999)


def make_base_schedule(steps: int) -> NoiseSchedule:
    betas = scaled_linear_betas(steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=alpha_bar)


def shift_snr(schedule: NoiseSchedule, n: float, invert: bool = False) -> NoiseSchedule:
    """Shift every log-SNR by log(sqrt(n)), downward by default (more noise
    at equal t). ``invert=True`` shifts upward instead."""
    if n < 1:
        raise ScheduleError("n must be >= 1")
    s = np.sqrt(float(n))
    if invert:
        s = 1.0 / s
    ab = schedule.alpha_bar
    # sigma(logSNR - log s) written without leaving [0, 1]
    shifted = ab / (ab + s * (1.0 - ab))
    return NoiseSchedule(alpha_bar=shifted)


def rescale_zero_terminal_snr(schedule: NoiseSchedule) -> NoiseSchedule:
    """Linearly rescale sqrt(alpha_bar) so the terminal entry is exactly zero
    while the clean end is preserved."""
    sq = np.sqrt(schedule.alpha_bar)
    s0, st = sq[0], sq[-1]
    if not s0 > st:
        raise ScheduleError("degenerate schedule: no signal decay to rescale")
    rescaled = (sq - st) * (s0 / (s0 - st))
    rescaled[-1] = 0.0
    rescaled[0] = s0
    return NoiseSchedule(alpha_bar=rescaled ** 2)


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule):
    """One deterministic DDIM update from timestep t to t_prev.

    ``z_prev = sqrt(ab_prev) * (z_t - sqrt(1-ab_t)*eps) / sqrt(ab_t)
             + sqrt(1-ab_prev) * eps``
    """
    a_t = schedule.alpha_bar[t]
    a_p = schedule.alpha_bar[t_prev]
    if a_t == 0.0:
        raise ScheduleError("source timestep has zero signal (division by zero)")
    x0 = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_p) * x0 + np.sqrt(1.0 - a_p) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, weight: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("guidance branches have mismatched shapes")
    return eps_uncond + weight * (eps_cond - eps_uncond)
