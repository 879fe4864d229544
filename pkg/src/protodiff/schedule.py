"""Cosine noise schedule and DDIM timestep subsequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise levels for ``t = 1..T``.

    ``betas`` and ``alphas`` are stored 0-based (``betas[t - 1]`` is beta_t).
    ``alpha_bars`` has ``T + 1`` entries with ``alpha_bars[0] == 1`` so the
    final DDIM step into ``t = 0`` needs no special case.
    """

    T: int
    s: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])


def build_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"cosine offset s must be in (0, 1), got {s!r}")
    T = int(T)

    def f(t):
        return math.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0)
    raw = [f(t) / f0 for t in range(T + 1)]
    betas = np.array([min(1.0 - raw[t] / raw[t - 1], MAX_BETA) for t in range(1, T + 1)])
    alphas = 1.0 - betas
    alpha_bars = np.empty(T + 1)
    alpha_bars[0] = 1.0
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t - 1]
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(T, float(s), betas, alphas, alpha_bars)


def subsample_timesteps(T: int, T_sample: int) -> list[int]:
    """Uniformly strided, strictly decreasing timesteps from ``T`` down to 1."""
    if T < 1 or not 1 <= T_sample <= T:
        raise ValueError(f"need 1 <= T_sample <= T, got T={T}, T_sample={T_sample}")
    if T_sample == 1:
        return [T]
    span, steps = T - 1, T_sample - 1
    # round-half-up of i * span / steps in exact integer arithmetic
    return [T - (2 * i * span + steps) // (2 * steps) for i in range(T_sample)]
