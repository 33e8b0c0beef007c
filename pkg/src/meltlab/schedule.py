"""Discrete cosine variance schedule shared by the denoiser and the samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """``beta[t-1]`` and ``alpha_bar[t-1]`` hold step ``t`` for ``t = 1..T``; step 0 is clean."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def b(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def posterior_variance(self, t: int) -> float:
        return self.b(t) * (1.0 - self.abar(t - 1)) / (1.0 - self.abar(t))


def cosine_closed_form(t, T: int, s: float = COSINE_OFFSET):
    f = lambda u: np.cos((u / T + s) / (1.0 + s) * math.pi / 2) ** 2  # noqa: E731
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> Schedule:
    """Squared-cosine cumulative signal level, normalised so the clean step has level 1.

    Betas are clipped to ``[1e-8, 0.999]`` and ``alpha_bar`` is rebuilt as their
    running product, so the last step keeps a small positive signal level.
    """
    if T < 1:
        raise DiffusionError("T must be >= 1")
    ab = cosine_closed_form(np.arange(T + 1), T, s)
    beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return Schedule(T, beta, alpha_bar)
