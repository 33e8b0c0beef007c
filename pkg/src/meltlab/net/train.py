"""Noise-prediction training with plain fixed-step gradient descent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from meltlab.diffusion import Schedule
from meltlab.net import autodiff as ad
from meltlab.net.model import Denoiser, to_float32_grid


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    cond_drop: float = 0.1


def train_step(model: Denoiser, x0, clouds, sched: Schedule, rng, lr: float, cond_drop: float = 0.1) -> float:
    """One SGD step on the noise-prediction loss; returns the batch loss.

    ``rng`` supplies timesteps, noise and the condition-dropout mask.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    t = 1 + (rng.uniform(b) * sched.T).astype(np.int64)
    noise = rng.normal(x0.shape)
    drop = rng.uniform(b) < cond_drop
    ab = sched.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    model.zero_grad()
    cond = model.drop_condition(model.encode_condition(clouds), drop)
    eps_hat = model.forward(x_t, t, cond)
    loss = ad.square_norm_mean(ad.sub(eps_hat, noise))
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    loss.backward()
    for p in model.params.values():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {p.name}")
        p.data = to_float32_grid(p.data - lr * p.grad)
    model.zero_grad()
    return value


def smoothed(losses, alpha: float = 0.05) -> np.ndarray:
    """Exponential moving average of a loss curve."""
    out = np.empty(len(losses))
    acc = losses[0]
    for i, v in enumerate(losses):
        acc = (1.0 - alpha) * acc + alpha * v
        out[i] = acc
    return out
