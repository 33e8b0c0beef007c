"""Autodiff engine and the conditional denoiser."""

from meltlab.net.model import (
    ActivationSite,
    Denoiser,
    DenoiserConfig,
    HookAction,
    HookMode,
    ModelError,
    Recorder,
    SiteKind,
    all_sites,
)

__all__ = [
    "ActivationSite",
    "Denoiser",
    "DenoiserConfig",
    "HookAction",
    "HookMode",
    "ModelError",
    "Recorder",
    "SiteKind",
    "all_sites",
]
