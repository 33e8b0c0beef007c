"""Activation patching over the block x timestep grid of a sampling run."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from meltlab.diffusion import Runner, Trace
from meltlab.geometry import components_of
from meltlab.net.model import SITE_ORDER, ActivationSite, HookAction, SiteKind, all_sites


class PatchingError(ValueError):
    pass


class VacuousScanWarning(UserWarning):
    pass


@dataclass
class RepairMap:
    """``grid[k, t - 1]`` is the component count when block ``k`` at timestep ``t`` is patched."""

    kind: SiteKind
    grid: np.ndarray
    baseline_C: int
    healthy_C: int
    seed: int = 0
    repairing_sites: list[ActivationSite] = field(default_factory=list)

    def to_csv(self, path, header: str = "") -> None:
        blocks, steps = self.grid.shape
        lines = [header] if header else []
        lines.append(",".join(["block"] + [f"t{t}" for t in range(1, steps + 1)]))
        for k in range(blocks):
            lines.append(",".join([str(k)] + [str(int(c)) for c in self.grid[k]]))
        Path(path).write_text("\n".join(lines) + "\n")
        meta = {
            "kind": self.kind.value,
            "seed": self.seed,
            "baseline_C": self.baseline_C,
            "healthy_C": self.healthy_C,
            "repairing_sites": [[s.block, s.timestep] for s in self.repairing_sites],
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def record_trace(runner: Runner, cloud, seed: int, kinds=SITE_ORDER) -> Trace:
    """One run on ``cloud`` recording every site of the given kinds."""
    sites = all_sites(runner.model.cfg, tuple(kinds))
    _, trace = runner.run(cloud, seed, record=sites)
    missing = [s for s in sites if s not in trace.activations]
    if missing:
        raise PatchingError(f"trace is missing {len(missing)} sites, e.g. {missing[0]}")
    return trace


def patched_run(runner: Runner, cloud, trace: Trace, sites, seed: int | None = None) -> tuple[np.ndarray, int]:
    """Rerun on ``cloud`` with the listed sites replaced by their recorded matrices."""
    if isinstance(sites, ActivationSite):
        sites = [sites]
    hooks = {}
    for site in sites:
        if site not in trace.activations:
            raise PatchingError(f"site {site} missing from trace")
        hooks[site] = HookAction.replace(trace.activations[site])
    x0, _ = runner.run(cloud, trace.seed if seed is None else seed, hooks)
    return x0, components_of(x0)


def scan_grid(
    runner: Runner,
    cloud_healthy,
    cloud_unhealthy,
    seed: int,
    kind: SiteKind = SiteKind.CA_WRITE,
    trace: Trace | None = None,
) -> RepairMap:
    """Patch one ``(block, timestep)`` site at a time with healthy activations."""
    cfg = runner.model.cfg
    if trace is None:
        trace = record_trace(runner, cloud_healthy, seed, (kind,))
    healthy_C = components_of(trace.latents[-1])
    baseline_C = runner.components(cloud_unhealthy, seed)
    if baseline_C <= 1:
        warnings.warn(f"baseline run already has C={baseline_C}; the scan shows no contrast", VacuousScanWarning, stacklevel=2)
    grid = np.zeros((cfg.blocks, cfg.timesteps), dtype=np.int64)
    for t in range(cfg.timesteps, 0, -1):
        for k in range(cfg.blocks):
            _, c = patched_run(runner, cloud_unhealthy, trace, ActivationSite(kind, k, t), seed)
            grid[k, t - 1] = c
    repairing = [ActivationSite(kind, k, t) for t in range(cfg.timesteps, 0, -1) for k in range(cfg.blocks) if grid[k, t - 1] == 1]
    return RepairMap(kind, grid, baseline_C, healthy_C, seed, repairing)


def full_replacement_run(runner: Runner, cloud_unhealthy, trace: Trace, kinds=SITE_ORDER) -> tuple[np.ndarray, int]:
    """Patch every recorded site of the given kinds at once."""
    sites = all_sites(runner.model.cfg, tuple(kinds))
    return patched_run(runner, cloud_unhealthy, trace, sites)
