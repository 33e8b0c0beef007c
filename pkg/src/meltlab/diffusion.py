"""Forward corruption, DDPM/DDIM updates and the sampling loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from meltlab.geometry import components_of
from meltlab.lab.rng import rng_stream
from meltlab.net.autodiff import no_grad
from meltlab.net.model import ActivationSite, Denoiser, HookMode, Hooks, Recorder
from meltlab.schedule import COSINE_OFFSET, DiffusionError, Schedule, cosine_closed_form, cosine_schedule  # noqa: F401


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DiffusionError(f"{what}: shape {a.shape} != {b.shape}")


def q_sample(x0, t: int, noise, sched: Schedule) -> np.ndarray:
    x0, noise = np.asarray(x0, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    _same_shape(x0, noise, "q_sample")
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def predict_x0(x_t, eps_hat, t: int, sched: Schedule) -> np.ndarray:
    ab = sched.abar(t)
    if ab <= 0.0:
        raise DiffusionError(f"alpha_bar at t={t} is zero")
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: Schedule) -> np.ndarray:
    """Deterministic (eta = 0) implicit update from ``t`` to ``t_prev``."""
    x_t, eps_hat = np.asarray(x_t, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    _same_shape(x_t, eps_hat, "ddim_step")
    if not t > t_prev >= 0:
        raise DiffusionError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(x_t, eps_hat, t, sched)
    ab_prev = sched.abar(t_prev)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def ddpm_step(x_t, eps_hat, t: int, noise, sched: Schedule) -> np.ndarray:
    """Ancestral update from ``t`` to ``t - 1``; ``noise`` is ignored at ``t = 1``."""
    x_t, eps_hat = np.asarray(x_t, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    _same_shape(x_t, eps_hat, "ddpm_step")
    if t < 1:
        raise DiffusionError("ddpm_step needs t >= 1")
    beta = sched.b(t)
    mean = (x_t - beta / math.sqrt(1.0 - sched.abar(t)) * eps_hat) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    noise = np.asarray(noise, dtype=np.float64)
    _same_shape(x_t, noise, "ddpm_step noise")
    return mean + math.sqrt(sched.posterior_variance(t)) * noise


def cfg_combine(eps_uncond, eps_cond, s: float) -> np.ndarray:
    eps_uncond, eps_cond = np.asarray(eps_uncond), np.asarray(eps_cond)
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    if s < 0:
        raise DiffusionError(f"guidance scale must be >= 0, got {s}")
    if s == 1.0:
        return eps_cond
    return eps_uncond + s * (eps_cond - eps_uncond)


@dataclass
class Trace:
    latents: list[np.ndarray]
    activations: dict[ActivationSite, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    fingerprint: str = ""


def initial_noise(seed: int, size: int) -> np.ndarray:
    return rng_stream(seed, "x_T", 0).normal((size, size))


def sample(
    model: Denoiser,
    cloud,
    seed: int,
    sampler: str = "ddim",
    hooks: Hooks | None = None,
    record=None,
    cfg_scale: float = 1.0,
    sched: Schedule | None = None,
) -> tuple[np.ndarray, Trace]:
    """Run the reverse chain ``t = T..1`` from the seeded terminal noise.

    ``record`` is ``None`` (record nothing), ``"all"`` or an iterable of sites.
    Hooks and recording act on the conditional stream only; with
    ``cfg_scale != 1`` the unconditional prediction is a separate, unhooked pass.
    """
    cfg = model.cfg
    sched = sched or cosine_schedule(cfg.timesteps)
    if sched.T != cfg.timesteps:
        raise DiffusionError(f"schedule has T={sched.T}, model expects {cfg.timesteps}")
    if sampler not in ("ddim", "ddpm"):
        raise DiffusionError(f"unknown sampler {sampler!r}")
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    recorder = None
    if record is not None or (hooks and any(a.mode is HookMode.RECORD for a in hooks.values())):
        recorder = Recorder(None if record == "all" else (record or ()))

    with no_grad():
        cond = model.encode_condition(points)
        null = model.null_condition(1) if cfg_scale != 1.0 else None
    x = initial_noise(seed, cfg.field_size)
    latents = [x]
    for t in range(sched.T, 0, -1):
        eps = model.predict(x[None], t, cond, hooks, recorder)[0]
        if null is not None:
            eps = cfg_combine(model.predict(x[None], t, null)[0], eps, cfg_scale)
        if sampler == "ddim":
            x = ddim_step(x, eps, t, t - 1, sched)
        else:
            noise = rng_stream(seed, "ddpm", t).normal(x.shape) if t > 1 else None
            x = ddpm_step(x, eps, t, noise, sched)
        latents.append(x)
    trace = Trace(latents, dict(recorder or {}), seed, cfg.fingerprint())
    return x, trace


@dataclass
class Runner:
    """A model plus sampler settings; counts sampling runs and denoiser calls."""

    model: Denoiser
    sampler: str = "ddim"
    cfg_scale: float = 1.0
    sched: Schedule | None = None
    runs: int = 0
    denoiser_calls: int = 0

    def __post_init__(self):
        if self.sched is None:
            self.sched = cosine_schedule(self.model.cfg.timesteps)

    def run(self, cloud, seed: int, hooks: Hooks | None = None, record=None) -> tuple[np.ndarray, Trace]:
        self.runs += 1
        self.denoiser_calls += self.sched.T * (1 if self.cfg_scale == 1.0 else 2)
        return sample(self.model, cloud, seed, self.sampler, hooks, record, self.cfg_scale, self.sched)

    def components(self, cloud, seed: int, hooks: Hooks | None = None) -> int:
        x0, _ = self.run(cloud, seed, hooks)
        return components_of(x0)
