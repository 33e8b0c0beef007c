"""Perturbation sweeps, adversarial search for fragmenting conditions, and PowerRemap rescue."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from meltlab.diffusion import Runner
from meltlab.geometry import (
    PointCloud,
    Surface,
    components_of,
    golden_angle_sample,
    jitter_renormalize,
    project_to_surface,
    rotate_circle,
    slerp_path,
)
from meltlab.lab.rng import derive_seed, rng_stream
from meltlab.linalg import spectrum
from meltlab.net.model import ActivationSite, DenoiserConfig, HookAction, SiteKind

DEFAULT_RHO_GRID = tuple(round(0.05 * i, 10) for i in range(21))
JITTER_SIGMA = 0.1
GLOBAL_GAMMA = 100.0
GAMMA_GRID = (1.05, 1.1, 1.15, 1.2, 1.25, 1.3, 1.35, 1.4, 1.5, 2.0)
NEUTRALITY_GAMMAS = (2.0, 5.0, 10.0, 100.0)


class SearchError(RuntimeError):
    pass


class NoMeltdownFound(SearchError):
    pass


def default_spectral_site(cfg: DenoiserConfig) -> ActivationSite:
    """Cross-attention write of the middle block at the first (noisiest) denoising step."""
    return ActivationSite(SiteKind.CA_WRITE, cfg.blocks // 2, cfg.timesteps)


@dataclass
class SweepResult:
    rho: np.ndarray
    C: np.ndarray
    H: np.ndarray
    r_eff: np.ndarray
    kappa: np.ndarray
    seed: int
    site: ActivationSite | None = None
    first_latents: list[np.ndarray] = field(default_factory=list, repr=False)

    def rows(self):
        for i in range(len(self.rho)):
            yield (float(self.rho[i]), int(self.C[i]), float(self.H[i]), float(self.r_eff[i]), float(self.kappa[i]))


def sweep_rho(runner: Runner, a: PointCloud, b: PointCloud, grid=DEFAULT_RHO_GRID, seed: int = 0, site=None) -> SweepResult:
    """Component count and spectral diagnostics along the SLERP path from ``a`` to ``b``.

    Every grid point restarts from the same seeded terminal noise.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any((grid < 0) | (grid > 1)):
        raise SearchError("rho grid must be nonempty and inside [0, 1]")
    site = site or default_spectral_site(runner.model.cfg)
    n = len(grid)
    C, H, r_eff, kappa = np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n), np.zeros(n)
    first = []
    for i, rho in enumerate(grid):
        cloud = slerp_path(a, b, float(rho))
        x0, trace = runner.run(cloud, seed, record=[site])
        C[i] = components_of(x0)
        spec = spectrum(trace.activations[site])
        H[i], r_eff[i], kappa[i] = spec.entropy, spec.effective_rank, spec.condition_number
        first.append(trace.latents[0])
    return SweepResult(grid, C, H, r_eff, kappa, seed, site, first)


def geometric_grid(rho_min: float = 1e-3, ratio: float = 2.0) -> np.ndarray:
    """``rho_min * ratio**j`` up to and including 1."""
    if not 0 < rho_min <= 1 or ratio <= 1:
        raise SearchError("need 0 < rho_min <= 1 and ratio > 1")
    vals = []
    r = rho_min
    while r < 1.0:
        vals.append(r)
        r *= ratio
    vals.append(1.0)
    return np.array(vals)


def sample_cloud(surface: Surface, n: int, rotation: float = 0.0) -> PointCloud:
    cloud = golden_angle_sample(n, surface.dim)
    if not rotation:
        return cloud
    if surface.kind == "circle":
        return rotate_circle(cloud, rotation)
    # Spin the sphere sample about its polar (y) axis.
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return project_to_surface(cloud.points @ rot.T, surface)


def find_min_budget(runner: Runner, surface: Surface, seed: int, budget_grid) -> int:
    """Smallest budget on the (ascending) grid whose sample gives exactly one component."""
    grid = [int(n) for n in budget_grid]
    if grid != sorted(grid):
        raise SearchError("budget grid must be ascending")
    for n in grid:
        if runner.components(sample_cloud(surface, n), seed) == 1:
            return n
    raise SearchError("no healthy budget")


def meltdown_partner(a: PointCloud, surface: Surface, rng, sigma: float = JITTER_SIGMA) -> PointCloud:
    """Jitter every point and project back onto the surface."""
    return project_to_surface(jitter_renormalize(a, sigma, rng).points, surface)


def lerp_path(a: PointCloud, b: PointCloud, rho: float, surface: Surface) -> PointCloud:
    """Projected straight-line interpolation; the endpoints are returned unchanged."""
    if rho == 0.0:
        return a
    if rho == 1.0:
        return b
    return project_to_surface((1.0 - rho) * a.points + rho * b.points, surface)


@dataclass
class Bisection:
    epsilon: float
    rho_lo: float
    C_lo: int
    C_hi: int
    probes: list[tuple[float, int]]
    converged: bool


def find_bracket(runner: Runner, a, b, surface: Surface, seed: int, grid=None, probes=None):
    """First consecutive pair on ``[0] + grid`` with ``C = 1`` then ``C > 1``."""
    grid = geometric_grid() if grid is None else np.asarray(grid)
    rhos = [0.0] + [float(r) for r in grid]
    probes = [] if probes is None else probes
    prev = None
    for rho in rhos:
        c = runner.components(lerp_path(a, b, rho, surface), seed)
        probes.append((rho, c))
        if prev is not None and prev[1] == 1 and c > 1:
            return prev, (rho, c), probes
        prev = (rho, c)
    raise NoMeltdownFound("no meltdown found")


def bracket_and_bisect(runner: Runner, a, b, surface: Surface, seed: int, tol: float = 1e-4, grid=None) -> Bisection:
    """Smallest probed ``rho`` with ``C > 1``, refined from a bracket by bisection.

    Only the invariant ``C(lo) = 1 < C(hi)`` is used, never monotonicity. A
    probe with an empty output (``C = 0``) fits neither side; the search then
    stops and reports the bracket it has.
    """
    probes: list[tuple[float, int]] = []
    (lo, c_lo), (hi, c_hi), _ = find_bracket(runner, a, b, surface, seed, grid, probes)
    converged = True
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        c = runner.components(lerp_path(a, b, mid, surface), seed)
        probes.append((mid, c))
        if c > 1:
            hi, c_hi = mid, c
        elif c == 1:
            lo, c_lo = mid, c
        else:
            converged = False
            break
    return Bisection(hi, lo, c_lo, c_hi, probes, converged)


@dataclass
class MeltdownCase:
    case_id: int
    N: int
    epsilon: float
    C0: int
    Ceps: int
    seed: int
    a: PointCloud = field(repr=False)
    b: PointCloud = field(repr=False)
    surface: Surface = field(default=None)
    rho_lo: float = 0.0

    def __post_init__(self):
        if self.C0 != 1 or self.Ceps <= 1 or not 0 < self.epsilon <= 1:
            raise SearchError(f"not a meltdown case: C0={self.C0}, Ceps={self.Ceps}, eps={self.epsilon}")

    def cloud(self) -> PointCloud:
        return lerp_path(self.a, self.b, self.epsilon, self.surface)


def adversarial_search(
    runner: Runner,
    surface: Surface,
    seed: int,
    budget_grid,
    case_id: int = 0,
    tol: float = 1e-4,
    sigma: float = JITTER_SIGMA,
) -> MeltdownCase:
    """Budget search, jitter partner, bracket and bisection for one seed."""
    n = find_min_budget(runner, surface, seed, budget_grid)
    a = sample_cloud(surface, n)
    b = meltdown_partner(a, surface, rng_stream(seed, "jitter", case_id), sigma)
    res = bracket_and_bisect(runner, a, b, surface, seed, tol)
    return MeltdownCase(case_id, n, res.epsilon, 1, res.C_hi, seed, a, b, surface, res.rho_lo)


@dataclass(frozen=True)
class SitePolicy:
    """Where PowerRemap is applied: every block at one timestep, or a single site."""

    kind: SiteKind = SiteKind.CA_WRITE
    timestep: int | None = None  # None means the earliest (noisiest) step
    block: int | None = None  # None means all blocks

    def sites(self, cfg: DenoiserConfig) -> list[ActivationSite]:
        t = cfg.timesteps if self.timestep is None else self.timestep
        blocks = range(cfg.blocks) if self.block is None else [self.block]
        sites = [ActivationSite(self.kind, k, t) for k in blocks]
        for s in sites:
            s.check(cfg)
        return sites

    def hooks(self, cfg: DenoiserConfig, gamma: float) -> dict:
        return {s: HookAction.transform(gamma) for s in self.sites(cfg)}


@dataclass
class RescueOutcome:
    case_id: int
    gamma: float
    C: int

    @property
    def rescued(self) -> bool:
        return self.C == 1


def evaluate_rescue(runner: Runner, cases, gamma_grid=(GLOBAL_GAMMA,), policy: SitePolicy = SitePolicy()):
    """Rerun each case at its critical perturbation with PowerRemap; a case counts if any gamma gives ``C = 1``."""
    outcomes: list[RescueOutcome] = []
    per_case = []
    for case in cases:
        cloud = case.cloud()
        hit = False
        for gamma in gamma_grid:
            c = runner.components(cloud, case.seed, policy.hooks(runner.model.cfg, gamma))
            outcomes.append(RescueOutcome(case.case_id, float(gamma), c))
            hit = hit or c == 1
        per_case.append(hit)
    rate = float(np.mean(per_case)) if per_case else math.nan
    return outcomes, rate


def neutrality_check(runner: Runner, clouds_and_seeds, gamma_grid=NEUTRALITY_GAMMAS, policy: SitePolicy = SitePolicy()):
    """Fraction of healthy runs (``C = 1``) that stay healthy under PowerRemap, per gamma."""
    rates = {}
    for gamma in gamma_grid:
        kept = [runner.components(cloud, seed, policy.hooks(runner.model.cfg, gamma)) == 1 for cloud, seed in clouds_and_seeds]
        rates[float(gamma)] = float(np.mean(kept)) if kept else math.nan
    return rates


@dataclass
class DensityRow:
    eta: float
    N: int
    trials: int
    found: int
    base_broken: int

    @property
    def incidence(self) -> float:
        return self.found / self.trials


def density_incidence(runner: Runner, surface: Surface, eta_grid, trials: int, seed: int, sigma: float = JITTER_SIGMA):
    """Per areal density, the fraction of independent trials in which a meltdown bracket exists.

    A trial draws a randomly rotated near-uniform sample at the budget implied
    by ``eta``, a jittered partner, and its own sampling seed. Trials whose
    unperturbed sample is already unhealthy count as not found and are also
    tallied separately.
    """
    if trials < 1:
        raise SearchError("trials must be >= 1")
    rows = []
    for j, eta in enumerate(eta_grid):
        n = max(1, int(round(eta * surface.area)))
        found = broken = 0
        for i in range(trials):
            rng = rng_stream(seed, f"density/{j}", i)
            trial_seed = derive_seed(seed, f"density-seed/{j}", i)
            a = sample_cloud(surface, n, rotation=2.0 * math.pi * float(rng.uniform()))
            if runner.components(a, trial_seed) != 1:
                broken += 1
                continue
            b = meltdown_partner(a, surface, rng, sigma)
            try:
                find_bracket(runner, a, b, surface, trial_seed)
                found += 1
            except NoMeltdownFound:
                pass
        rows.append(DensityRow(float(eta), n, trials, found, broken))
    return rows
