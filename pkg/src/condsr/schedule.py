"""Cosine noise schedule and inference-time timestep subsequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed alpha/sigma/snr tables for t = 0..T.

    ``snr[0]`` is ``+inf`` and ``snr[T]`` is ``0.0``; both are sentinels
    and nothing downstream divides by them.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    snr: np.ndarray

    def __post_init__(self):
        for arr in (self.alpha, self.sigma, self.snr):
            arr.setflags(write=False)

    def check_t(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """alpha_t = cos(pi/2 * t/T), sigma_t = sqrt(1 - alpha_t^2)."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    t = np.arange(T + 1, dtype=np.float64)
    alpha = np.cos(0.5 * math.pi * t / T)
    # cos(pi/2) evaluates to ~6e-17; pin the endpoints exactly.
    alpha[0] = 1.0
    alpha[T] = 0.0
    sigma = np.sqrt(1.0 - alpha**2)
    snr = np.empty(T + 1)
    snr[0] = math.inf
    snr[T] = 0.0
    if T > 1:
        snr[1:T] = alpha[1:T] ** 2 / sigma[1:T] ** 2
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, snr=snr)


def subsample_timesteps(schedule: NoiseSchedule, inference_steps: int) -> list[int]:
    """Evenly spaced descending timesteps ``round(i*T/S)`` for i = S..1.

    The implicit final target (0) is not included.
    """
    S = int(inference_steps)
    T = schedule.T
    if S < 1 or S > T:
        raise ValueError(f"inference_steps must be in [1, {T}], got {inference_steps}")
    # Integer round-half-up keeps the result platform independent.
    steps = [(2 * i * T + S) // (2 * S) for i in range(S, 0, -1)]
    # T >= S implies a stride >= 1, so rounding never produces duplicates or 0.
    assert len(set(steps)) == S and steps[-1] >= 1
    return steps
