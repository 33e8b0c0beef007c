"""Flat ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from meltlab.lab.dataset import DiskDataset
from meltlab.net.model import DenoiserConfig, SiteKind
from meltlab.net.train import TrainConfig


class ConfigError(ValueError):
    pass


def parse_grid(text: str) -> tuple[float, ...]:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range must be start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"bad range {text!r}")
        n = int(round((stop - start) / step))
        if abs(start + n * step - stop) > 1e-9 * max(1.0, abs(stop)):
            raise ConfigError(f"range {text!r} does not land on its stop value")
        return tuple(round(start + i * step, 12) for i in range(n + 1))
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _kinds(text: str) -> tuple[str, ...]:
    names = tuple(v.strip() for v in text.split(",") if v.strip())
    valid = {k.value for k in SiteKind}
    for n in names:
        if n not in valid:
            raise ConfigError(f"unknown site kind {n!r}; choose from {sorted(valid)}")
    return names


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none", "all", "earliest") else int(text)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    checkpoint: str = ""
    # model
    blocks: int = 4
    field_size: int = 32
    patch: int = 4
    token_dim: int = 64
    heads: int = 4
    cond_tokens: int = 16
    cond_dim: int = 32
    timesteps: int = 8
    parametrization: str = "v"
    # sampling
    sampler: str = "ddim"
    cfg_scale: float = 1.0
    # training
    train_steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    cond_drop: float = 0.1
    # toy data
    radius_min: float = 0.45
    radius_max: float = 1.1
    center_max: float = 0.12
    points_min: int = 6
    points_max: int = 24
    # experiments
    rho_grid: tuple[float, ...] = tuple(round(0.05 * i, 12) for i in range(21))
    sweep_points: int = 12
    jitter_sigma: float = 0.1
    spectral_block: int = 2
    spectral_timestep: int = 8
    budget_grid: tuple[int, ...] = (4, 5, 6, 8, 10, 12, 16, 20, 24)
    search_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    bisect_tol: float = 1e-4
    gamma_grid: tuple[float, ...] = (100.0,)
    neutrality_gammas: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0, 100.0)
    neutrality_seeds: int = 10
    policy_block: int | None = None
    policy_timestep: int | None = None
    patch_kinds: tuple[str, ...] = ("sa", "ca", "residual", "mlp")
    eta_grid: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    density_trials: int = 5
    paths: int = 100
    dyn_mu: float = 2.0
    dyn_sigma0: float = 0.2
    dyn_steps: int = 1000

    def __post_init__(self):
        for name in ("rho_grid", "budget_grid", "search_seeds", "gamma_grid", "eta_grid", "patch_kinds", "neutrality_gammas"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must be nonempty")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned value")
        if any(not 0 <= r <= 1 for r in self.rho_grid):
            raise ConfigError("rho_grid values must lie in [0, 1]")
        if list(self.budget_grid) != sorted(self.budget_grid):
            raise ConfigError("budget_grid must be ascending")
        if any(g <= 0 for g in self.gamma_grid + self.neutrality_gammas):
            raise ConfigError("gammas must be > 0")
        if self.sampler not in ("ddim", "ddpm"):
            raise ConfigError(f"sampler must be ddim or ddpm, got {self.sampler!r}")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            blocks=self.blocks,
            field_size=self.field_size,
            patch=self.patch,
            token_dim=self.token_dim,
            heads=self.heads,
            cond_tokens=self.cond_tokens,
            cond_dim=self.cond_dim,
            timesteps=self.timesteps,
            point_dim=2,
            parametrization=self.parametrization,
        )

    def dataset(self) -> DiskDataset:
        return DiskDataset(
            field_size=self.field_size,
            radius_min=self.radius_min,
            radius_max=self.radius_max,
            center_max=self.center_max,
            points_min=self.points_min,
            points_max=self.points_max,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.train_steps, batch=self.batch, lr=self.lr, cond_drop=self.cond_drop)

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "model.ckpt"

    def sha(self) -> str:
        """Hash of the experiment settings; where outputs and checkpoints live is not part of it."""
        values = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("output_dir", "checkpoint")}
        blob = json.dumps(values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_PARSERS = {
    "rho_grid": parse_grid,
    "gamma_grid": parse_grid,
    "neutrality_gammas": parse_grid,
    "eta_grid": parse_grid,
    "budget_grid": _ints,
    "search_seeds": _ints,
    "patch_kinds": _kinds,
    "policy_block": _optional_int,
    "policy_timestep": _optional_int,
}


def coerce(name: str, text: str):
    if name in _PARSERS:
        return _PARSERS[name](text)
    default = {f.name: f.default for f in fields(RunConfig)}[name]
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text, 0)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = coerce(key, value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return values


def load_config(path=None, overrides: dict | None = None, env=os.environ) -> RunConfig:
    """Defaults, then the config file, then explicit overrides, then ``LAB_SEED``."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        values.update(parse_config_text(text, str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get("LAB_SEED"):
        try:
            values["seed"] = int(env["LAB_SEED"], 0)
        except ValueError as e:
            raise ConfigError(f"LAB_SEED is not an integer: {env['LAB_SEED']!r}") from e
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
