import math
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import SMALL
from meltlab.diffusion import Runner, sample
from meltlab.geometry import UNIT_CIRCLE, UNIT_SPHERE, components_of, golden_angle_sample, rotate_circle
from meltlab.lab.rng import rng_stream
from meltlab.linalg import spectrum
from meltlab.meltdown import (
    DEFAULT_RHO_GRID,
    GAMMA_GRID,
    MeltdownCase,
    NoMeltdownFound,
    SearchError,
    SitePolicy,
    adversarial_search,
    bracket_and_bisect,
    default_spectral_site,
    density_incidence,
    evaluate_rescue,
    find_bracket,
    find_min_budget,
    geometric_grid,
    lerp_path,
    meltdown_partner,
    neutrality_check,
    sample_cloud,
    sweep_rho,
)
from meltlab.net.model import ActivationSite, HookMode, SiteKind


class FakeRunner:
    """Stands in for a sampler: the component count is ``fn(cloud, seed, hooks)``."""

    def __init__(self, fn, cfg=SMALL):
        self.fn = fn
        self.model = SimpleNamespace(cfg=cfg)
        self.runs = 0

    def components(self, cloud, seed, hooks=None):
        self.runs += 1
        return self.fn(cloud, seed, hooks)


def _displacement(a):
    return lambda cloud: float(np.abs(cloud.points - a.points).max())


A = golden_angle_sample(10, 2)
B = meltdown_partner(A, UNIT_CIRCLE, rng_stream(0, "jitter", 0))


def test_default_grid_and_constants():
    assert len(DEFAULT_RHO_GRID) == 21 and DEFAULT_RHO_GRID[0] == 0.0 and DEFAULT_RHO_GRID[-1] == 1.0
    assert DEFAULT_RHO_GRID[1] == 0.05
    assert GAMMA_GRID == (1.05, 1.1, 1.15, 1.2, 1.25, 1.3, 1.35, 1.4, 1.5, 2.0)


def test_geometric_grid():
    g = geometric_grid()
    assert g[0] == 1e-3 and g[-1] == 1.0
    assert np.allclose(g[1:-1] / g[:-2], 2.0)
    assert len(g) == 11
    with pytest.raises(SearchError):
        geometric_grid(0.0)
    with pytest.raises(SearchError):
        geometric_grid(0.1, 1.0)


def test_partner_is_on_surface_and_seeded():
    assert np.allclose(np.linalg.norm(B.points, axis=1), 1.0, atol=1e-12)
    again = meltdown_partner(A, UNIT_CIRCLE, rng_stream(0, "jitter", 0))
    assert np.array_equal(B.points, again.points)


def test_lerp_path_endpoints_and_projection():
    assert lerp_path(A, B, 0.0, UNIT_CIRCLE) is A
    assert lerp_path(A, B, 1.0, UNIT_CIRCLE) is B
    mid = lerp_path(A, B, 0.5, UNIT_CIRCLE)
    assert np.allclose(np.linalg.norm(mid.points, axis=1), 1.0, atol=1e-12)


def test_sample_cloud_rotation():
    base = sample_cloud(UNIT_SPHERE, 20)
    spun = sample_cloud(UNIT_SPHERE, 20, rotation=0.3)
    assert np.allclose(spun.points[:, 1], base.points[:, 1])
    assert np.allclose(np.linalg.norm(spun.points, axis=1), 1.0)
    assert np.allclose(sample_cloud(UNIT_CIRCLE, 7, 0.5).points, rotate_circle(golden_angle_sample(7, 2), 0.5).points)


def test_min_budget_is_smallest_healthy():
    runner = FakeRunner(lambda c, s, h: 1 if len(c.points) >= 8 else 2)
    assert find_min_budget(runner, UNIT_CIRCLE, 0, (4, 6, 8, 10)) == 8
    # Re-verify: the returned budget is healthy and the one below is not.
    assert runner.components(sample_cloud(UNIT_CIRCLE, 8), 0) == 1
    assert runner.components(sample_cloud(UNIT_CIRCLE, 6), 0) != 1


def test_min_budget_failure_and_order():
    runner = FakeRunner(lambda c, s, h: 3)
    with pytest.raises(SearchError, match="no healthy budget"):
        find_min_budget(runner, UNIT_CIRCLE, 0, (4, 8))
    with pytest.raises(SearchError):
        find_min_budget(runner, UNIT_CIRCLE, 0, (8, 4))


@pytest.mark.parametrize("threshold", [0.004, 0.03, 0.2])
def test_bisection_brackets_a_threshold(threshold):
    d = _displacement(A)
    runner = FakeRunner(lambda c, s, h: 1 if d(c) < threshold else 4)
    res = bracket_and_bisect(runner, A, B, UNIT_CIRCLE, 0, tol=1e-4)
    assert res.converged
    assert res.epsilon - res.rho_lo <= 1e-4
    assert res.C_lo == 1 and res.C_hi == 4
    # Re-evaluate at the returned bounds.
    assert runner.components(lerp_path(A, B, res.epsilon, UNIT_CIRCLE), 0) > 1
    assert runner.components(lerp_path(A, B, res.rho_lo, UNIT_CIRCLE), 0) == 1
    assert min(r for r, c in res.probes if c > 1) == res.epsilon


def test_bisection_uses_only_the_bracket_invariant():
    # Healthy, broken, healthy again, broken: the first bracket on the grid is refined.
    d = _displacement(A)
    bands = lambda c, s, h: 1 if (d(c) < 0.01 or 0.05 < d(c) < 0.1) else 2  # noqa: E731
    runner = FakeRunner(bands)
    res = bracket_and_bisect(runner, A, B, UNIT_CIRCLE, 0)
    assert runner.components(lerp_path(A, B, res.epsilon, UNIT_CIRCLE), 0) == 2
    assert runner.components(lerp_path(A, B, res.rho_lo, UNIT_CIRCLE), 0) == 1
    assert res.epsilon - res.rho_lo <= 1e-4


def test_empty_probe_stops_bisection():
    d = _displacement(A)
    runner = FakeRunner(lambda c, s, h: 1 if d(c) < 0.01 else (0 if d(c) < 0.05 else 3))
    # The bracket needs C = 1 then C > 1, so the empty band must sit between grid points.
    grid = [0.001, 0.002, 0.004, 0.5, 1.0]
    res = bracket_and_bisect(runner, A, B, UNIT_CIRCLE, 0, grid=grid)
    assert not res.converged
    assert any(c == 0 for _, c in res.probes)


def test_no_meltdown_found():
    runner = FakeRunner(lambda c, s, h: 1)
    with pytest.raises(NoMeltdownFound, match="no meltdown found"):
        find_bracket(runner, A, B, UNIT_CIRCLE, 0)


def test_adversarial_search_with_fake_model():
    def fn(cloud, seed, hooks):
        if len(cloud.points) < 8:
            return 2
        return 1 if float(np.abs(cloud.points - sample_cloud(UNIT_CIRCLE, len(cloud.points)).points).max()) < 0.02 else 3

    case = adversarial_search(FakeRunner(fn), UNIT_CIRCLE, seed=4, budget_grid=(4, 6, 8, 12), case_id=2)
    assert case.N == 8 and case.C0 == 1 and case.Ceps == 3
    assert 0 < case.epsilon <= 1 and case.case_id == 2
    assert fn(case.cloud(), 4, None) == 3


def test_case_invariants():
    with pytest.raises(SearchError):
        MeltdownCase(0, 8, 0.1, 2, 3, 0, A, B, UNIT_CIRCLE)
    with pytest.raises(SearchError):
        MeltdownCase(0, 8, 0.1, 1, 1, 0, A, B, UNIT_CIRCLE)
    with pytest.raises(SearchError):
        MeltdownCase(0, 8, 0.0, 1, 2, 0, A, B, UNIT_CIRCLE)


def test_site_policy():
    sites = SitePolicy().sites(SMALL)
    assert sites == [ActivationSite(SiteKind.CA_WRITE, k, SMALL.timesteps) for k in range(SMALL.blocks)]
    hooks = SitePolicy(block=1, timestep=2).hooks(SMALL, 5.0)
    assert list(hooks) == [ActivationSite(SiteKind.CA_WRITE, 1, 2)]
    assert all(a.mode is HookMode.TRANSFORM and a.gamma == 5.0 for a in hooks.values())
    with pytest.raises(ValueError):
        SitePolicy(block=9).sites(SMALL)


def _gamma_of(hooks):
    return next(iter(hooks.values())).gamma if hooks else None


def test_rescue_counts_a_case_if_any_gamma_works():
    cases = [MeltdownCase(i, 8, 0.1, 1, 2, i, A, B, UNIT_CIRCLE) for i in range(3)]
    # Case 0 is rescued only at gamma 2, case 1 never, case 2 at every gamma.
    table = {0: {2.0: 1}, 2: {1.5: 1, 2.0: 1}}
    runner = FakeRunner(lambda c, s, h: table.get(s, {}).get(_gamma_of(h), 2))
    outcomes, rate = evaluate_rescue(runner, cases, gamma_grid=(1.5, 2.0))
    assert len(outcomes) == 6
    assert [(o.case_id, o.gamma, o.rescued) for o in outcomes] == [
        (0, 1.5, False), (0, 2.0, True), (1, 1.5, False), (1, 2.0, False), (2, 1.5, True), (2, 2.0, True)
    ]
    assert rate == pytest.approx(2 / 3)
    assert math.isnan(evaluate_rescue(runner, [])[1])


def test_neutrality_rates():
    runner = FakeRunner(lambda c, s, h: 1 if _gamma_of(h) < 50 else 2)
    rates = neutrality_check(runner, [(A, 0), (B, 1)], gamma_grid=(1.0, 10.0, 100.0))
    assert rates == {1.0: 1.0, 10.0: 1.0, 100.0: 0.0}


def test_density_incidence_is_a_fraction():
    runner = FakeRunner(lambda c, s, h: 1 if len(c.points) > 8 else 2)
    rows = density_incidence(runner, UNIT_CIRCLE, (1.0, 2.0), trials=3, seed=0)
    assert [r.N for r in rows] == [6, 13]
    assert rows[0].base_broken == 3 and rows[0].incidence == 0.0
    assert rows[1].base_broken == 0 and rows[1].incidence == 0.0
    single = density_incidence(FakeRunner(lambda c, s, h: 1), UNIT_CIRCLE, (2.0,), trials=1, seed=0)
    assert single[0].incidence in (0.0, 1.0)
    with pytest.raises(SearchError):
        density_incidence(runner, UNIT_CIRCLE, (1.0,), trials=0, seed=0)


def test_sweep_protocol_with_live_model(small_model):
    runner = Runner(small_model)
    a = golden_angle_sample(8, 2)
    b = rotate_circle(a, 0.3)
    grid = (0.0, 0.25, 0.5, 1.0)
    res = sweep_rho(runner, a, b, grid, seed=5)
    assert res.site == default_spectral_site(SMALL) == ActivationSite(SiteKind.CA_WRITE, SMALL.blocks // 2, SMALL.timesteps)
    assert len(res.C) == len(res.H) == len(res.r_eff) == len(res.kappa) == 4
    assert np.abs(res.r_eff - np.exp(res.H)).max() <= 1e-12
    x_a, trace_a = sample(small_model, a, 5, record=[res.site])
    x_b, _ = sample(small_model, b, 5)
    assert res.C[0] == components_of(x_a) and res.C[-1] == components_of(x_b)
    assert res.H[0] == spectrum(trace_a.activations[res.site]).entropy
    assert all(np.array_equal(l0, res.first_latents[0]) for l0 in res.first_latents)
    assert list(res.rows())[0][0] == 0.0
    with pytest.raises(SearchError):
        sweep_rho(runner, a, b, (0.5, 1.5))


def test_unit_gamma_controls_with_live_model(small_model):
    runner = Runner(small_model)
    clouds = [(golden_angle_sample(n, 2), n) for n in (6, 9)]
    base = [runner.components(c, s) for c, s in clouds]
    policy = SitePolicy()
    assert [runner.components(c, s, policy.hooks(SMALL, 1.0)) for c, s in clouds] == base
