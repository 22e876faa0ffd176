"""Forward noising and the deterministic x0-prediction reverse process."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import rng
from .image import SIGNED, ImageTensor
from .schedule import NoiseSchedule


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        """Return an estimate of x0 with the shape of ``x_t``."""


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def forward_diffuse(x0, t: int, eps: rng.NoiseDraw, schedule: NoiseSchedule) -> LatentState:
    """x_t = alpha_t * x0 + sigma_t * eps (unclamped)."""
    x0 = _as_array(x0)
    t = schedule.check_t(t, lo=1)
    if eps.eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.eps.shape} != image shape {x0.shape}")
    return LatentState(schedule.alpha[t] * x0 + schedule.sigma[t] * eps.eps, t)


def estimate_noise(state: LatentState, x0_hat, schedule: NoiseSchedule) -> np.ndarray:
    t = schedule.check_t(state.t)
    if t == 0:
        raise ValueError("cannot estimate noise at t=0 (sigma_0 = 0)")
    x0_hat = _as_array(x0_hat)
    return (state.x - schedule.alpha[t] * x0_hat) / schedule.sigma[t]


def ddim_step(state: LatentState, x0_hat, t_prev: int, schedule: NoiseSchedule) -> LatentState:
    """Move from ``state.t`` to ``t_prev`` along the implied noise direction."""
    t_prev = schedule.check_t(t_prev)
    if t_prev >= state.t:
        raise ValueError(f"t_prev={t_prev} must be below t={state.t}")
    x0_hat = _as_array(x0_hat)
    if x0_hat.shape != state.x.shape:
        raise ValueError(f"prediction shape {x0_hat.shape} != latent shape {state.x.shape}")
    z_hat = estimate_noise(state, x0_hat, schedule)
    if t_prev == 0:
        return LatentState(x0_hat.copy(), 0)
    return LatentState(schedule.alpha[t_prev] * x0_hat + schedule.sigma[t_prev] * z_hat, t_prev)


def iterate_sampler(denoiser: Denoiser, condition: ImageTensor, schedule: NoiseSchedule,
                    steps: Sequence[int], seed: int) -> Iterator[tuple[LatentState, np.ndarray]]:
    """Yield ``(state, x0_hat)`` for each visited timestep, starting from x_T.

    Noise is drawn once, for x_T. No per-step noise is drawn since the
    update never uses it.
    """
    steps = [int(s) for s in steps]
    if not steps or steps[0] != schedule.T or any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError("steps must be strictly decreasing and start at T")
    if steps[-1] < 1:
        raise ValueError("steps must be >= 1; the final target 0 is implicit")
    if condition.range_tag != SIGNED:
        raise ValueError("condition must be a signed image")
    cond = condition.data
    x_T = rng.NoiseDraw.draw(cond.shape, seed, rng.SAMPLE, 0).eps
    state = LatentState(x_T, schedule.T)
    targets = steps[1:] + [0]
    for t_prev in targets:
        x0_hat = np.asarray(denoiser.predict(state.x, state.t, cond), dtype=np.float64)
        if x0_hat.shape != state.x.shape:
            raise ValueError(f"denoiser returned shape {x0_hat.shape}, expected {state.x.shape}")
        yield state, x0_hat
        state = ddim_step(state, x0_hat, t_prev, schedule)


def sample(denoiser: Denoiser, condition: ImageTensor, schedule: NoiseSchedule,
           steps: Sequence[int], seed: int) -> ImageTensor:
    """Generate an image for ``condition``; the terminal x0_hat is clamped to [-1, 1]."""
    x0_hat = None
    for _, x0_hat in iterate_sampler(denoiser, condition, schedule, steps, seed):
        pass
    return ImageTensor(np.clip(x0_hat, -1.0, 1.0), SIGNED)
