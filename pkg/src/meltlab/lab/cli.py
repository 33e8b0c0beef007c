"""Command-line entry point: ``meltlab <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from meltlab import dynamics as dyn
from meltlab.diffusion import Runner
from meltlab.geometry import UNIT_CIRCLE, golden_angle_sample, jitter_renormalize, read_points_csv, write_points_csv
from meltlab.lab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from meltlab.lab.config import ConfigError, RunConfig, load_config, parse_grid
from meltlab.lab.csvio import header_line, read_csv, write_csv
from meltlab.lab.rng import rng_stream
from meltlab.meltdown import (
    MeltdownCase,
    NoMeltdownFound,
    SearchError,
    SitePolicy,
    adversarial_search,
    density_incidence,
    evaluate_rescue,
    neutrality_check,
    sample_cloud,
    sweep_rho,
)
from meltlab.net.model import ActivationSite, Denoiser, SiteKind
from meltlab.net.train import smoothed, train_step
from meltlab.patching import full_replacement_run, record_trace, scan_grid

log = logging.getLogger("meltlab")

CASE_COLUMNS = ["case_id", "N", "epsilon", "C0", "Ceps", "seed", "rho_lo"]


class RunFailure(RuntimeError):
    pass


# -- shared helpers -----------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_runner(cfg: RunConfig) -> Runner:
    path = cfg.checkpoint_path()
    if not path.exists():
        raise RunFailure(f"no checkpoint at {path}; run 'meltlab train' first")
    model = Denoiser(cfg.model_config())
    try:
        load_checkpoint(path, model)
    except CheckpointError as e:
        raise RunFailure(f"{path}: {e}") from e
    return Runner(model, cfg.sampler, cfg.cfg_scale)


def _provenance(cfg: RunConfig) -> str:
    return header_line(cfg.seed, cfg.sha())


def _write(cfg: RunConfig, name: str, columns, rows, append: bool = False) -> Path:
    path = _out(cfg) / name
    write_csv(path, columns, rows, cfg.seed, cfg.sha(), append=append)
    log.info("wrote %s", path)
    return path


def _case_dir(cfg: RunConfig) -> Path:
    d = _out(cfg) / "cases"
    d.mkdir(exist_ok=True)
    return d


def _load_cases(cfg: RunConfig) -> list[MeltdownCase]:
    path = _out(cfg) / "cases.csv"
    if not path.exists():
        return []
    _, rows = read_csv(path)
    cases = []
    for r in rows:
        cid = int(r["case_id"])
        a = read_points_csv(_case_dir(cfg) / f"case_{cid}_a.csv", UNIT_CIRCLE)
        b = read_points_csv(_case_dir(cfg) / f"case_{cid}_b.csv", UNIT_CIRCLE)
        cases.append(
            MeltdownCase(
                cid, int(r["N"]), float(r["epsilon"]), int(r["C0"]), int(r["Ceps"]), int(r["seed"]), a, b, UNIT_CIRCLE, float(r["rho_lo"])
            )
        )
    return cases


def _policy(cfg: RunConfig) -> SitePolicy:
    return SitePolicy(SiteKind.CA_WRITE, cfg.policy_timestep, cfg.policy_block)


# -- subcommands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> None:
    model = Denoiser(cfg.model_config(), seed=cfg.seed)
    data = cfg.dataset()
    tc = cfg.train_config()
    runner = Runner(model)
    losses = []
    start = time.perf_counter()
    for step in range(tc.steps):
        rng = rng_stream(cfg.seed, "train", step)
        fields, clouds = data.batch(tc.batch, rng)
        losses.append(train_step(model, fields, clouds, runner.sched, rng, tc.lr, tc.cond_drop))
        if step % 100 == 0 or step == tc.steps - 1:
            log.info("step %d loss %.3f (%.0fs)", step, losses[-1], time.perf_counter() - start)
    path = cfg.checkpoint_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model)
    log.info("saved %s", path)
    ema = smoothed(losses)
    _write(cfg, "train_loss.csv", ["step", "loss", "smoothed"], [(i, losses[i], float(ema[i])) for i in range(len(losses))])


def _sweep_clouds(cfg: RunConfig):
    a = golden_angle_sample(cfg.sweep_points, 2)
    b = jitter_renormalize(a, cfg.jitter_sigma, rng_stream(cfg.seed, "sweep-jitter", 0))
    return a, b


def cmd_sweep(cfg: RunConfig, args) -> None:
    runner = _load_runner(cfg)
    a, b = _sweep_clouds(cfg)
    site = ActivationSite(SiteKind.CA_WRITE, cfg.spectral_block, cfg.spectral_timestep)
    site.check(runner.model.cfg)
    res = sweep_rho(runner, a, b, cfg.rho_grid, cfg.seed, site)
    _write(cfg, "sweep.csv", ["rho", "C", "H", "r_eff", "kappa"], res.rows())
    write_points_csv(_out(cfg) / "sweep_a.csv", a, _provenance(cfg))
    write_points_csv(_out(cfg) / "sweep_b.csv", b, _provenance(cfg))


def cmd_search(cfg: RunConfig, args) -> None:
    runner = _load_runner(cfg)
    found, status = [], []
    for seed in cfg.search_seeds:
        try:
            case = adversarial_search(runner, UNIT_CIRCLE, seed, cfg.budget_grid, case_id=seed, tol=cfg.bisect_tol, sigma=cfg.jitter_sigma)
        except NoMeltdownFound:
            status.append((seed, "no_meltdown", "", ""))
            continue
        except SearchError as e:
            status.append((seed, str(e).replace(" ", "_"), "", ""))
            continue
        write_points_csv(_case_dir(cfg) / f"case_{case.case_id}_a.csv", case.a, _provenance(cfg))
        write_points_csv(_case_dir(cfg) / f"case_{case.case_id}_b.csv", case.b, _provenance(cfg))
        found.append(case)
        status.append((seed, "found", case.N, case.epsilon))
        log.info("seed %d: meltdown at N=%d eps=%.6g (C %d -> %d)", seed, case.N, case.epsilon, case.C0, case.Ceps)
    # Rows for re-searched seeds replace earlier ones; other cases are kept.
    new_ids = {c.case_id for c in found} | set(cfg.search_seeds)
    kept = [c for c in _load_cases(cfg) if c.case_id not in new_ids]
    cases = sorted(kept + found, key=lambda c: c.case_id)
    _write(cfg, "cases.csv", CASE_COLUMNS, [(c.case_id, c.N, c.epsilon, c.C0, c.Ceps, c.seed, c.rho_lo) for c in cases])
    _write(cfg, "search_status.csv", ["seed", "status", "N", "epsilon"], status)


def _select_case(cfg: RunConfig, case_id):
    cases = _load_cases(cfg)
    if not cases:
        raise RunFailure("no meltdown case recorded; run 'meltlab search' first")
    if case_id is None:
        return cases[0]
    for c in cases:
        if c.case_id == case_id:
            return c
    raise RunFailure(f"case {case_id} not found")


def cmd_patch_scan(cfg: RunConfig, args) -> None:
    runner = _load_runner(cfg)
    case = _select_case(cfg, args.case_id)
    healthy, unhealthy = case.a, case.cloud()
    kinds = tuple(SiteKind(k) for k in cfg.patch_kinds)
    trace = record_trace(runner, healthy, case.seed, kinds)
    summary = []
    for kind in kinds:
        rmap = scan_grid(runner, healthy, unhealthy, case.seed, kind, trace)
        rmap.to_csv(_out(cfg) / f"repair_{kind.value}.csv", f"{_provenance(cfg)} case={case.case_id}")
        summary.append((kind.value, rmap.baseline_C, rmap.healthy_C, len(rmap.repairing_sites), int(rmap.grid.min()), int(rmap.grid.max())))
    _, c_full = full_replacement_run(runner, unhealthy, trace, kinds)
    summary.append(("all_sites", int(summary[0][1]), int(summary[0][2]), int(c_full == 1), c_full, c_full))
    _write(cfg, "patch_summary.csv", ["kind", "baseline_C", "healthy_C", "repairing_sites", "C_min", "C_max"], summary)
    log.info("patch scan used %d sampling runs", runner.runs)


def _healthy_instances(cfg: RunConfig, runner: Runner, n_points: int):
    """Randomly rotated near-uniform clouds whose unperturbed run has one component."""
    out = []
    for i in range(cfg.neutrality_seeds):
        rng = rng_stream(cfg.seed, "neutrality", i)
        cloud = sample_cloud(UNIT_CIRCLE, n_points, rotation=2.0 * math.pi * float(rng.uniform()))
        seed = cfg.seed + i
        if runner.components(cloud, seed) == 1:
            out.append((cloud, seed))
    return out


def cmd_rescue(cfg: RunConfig, args) -> None:
    runner = _load_runner(cfg)
    cases = _load_cases(cfg)
    outcomes, rate = evaluate_rescue(runner, cases, cfg.gamma_grid, _policy(cfg))
    by_id = {c.case_id: c for c in cases}
    rows = [(o.case_id, by_id[o.case_id].N, by_id[o.case_id].epsilon, by_id[o.case_id].C0, by_id[o.case_id].Ceps, o.gamma, o.rescued) for o in outcomes]
    _write(cfg, "rescue.csv", ["case_id", "N", "epsilon", "C0", "Ceps", "gamma", "rescued"], rows)
    n_points = cases[0].N if cases else cfg.sweep_points
    healthy = _healthy_instances(cfg, runner, n_points)
    rates = neutrality_check(runner, healthy, cfg.neutrality_gammas, _policy(cfg))
    _write(cfg, "neutrality.csv", ["gamma", "preserved", "instances"], [(g, r, len(healthy)) for g, r in rates.items()])
    log.info("rescue rate %s over %d cases; neutrality %s", rate, len(cases), rates)


def cmd_dynamics(cfg: RunConfig, args) -> None:
    vp = dyn.VPProcess()
    gmm = dyn.GMM.symmetric(cfg.dyn_mu, cfg.dyn_sigma0)
    bundle, fractions = dyn.ensemble_run(gmm, vp, cfg.paths, cfg.seed, cfg.dyn_steps)
    _write(cfg, "ensemble.csv", ["mode", "mean", "weight", "fraction"], [(j, float(gmm.means[j, 0]), float(gmm.weights[j]), float(fractions[j])) for j in range(2)])

    s_grid = np.linspace(1e-3, 1.0, 400)
    tau = dyn.detect_bifurcation(gmm, vp, s_grid)
    closed = dyn.critical_time(cfg.dyn_mu, cfg.dyn_sigma0, vp)
    _write(cfg, "bifurcation.csv", ["tau_star", "tau_closed_form", "grid_step"], [(tau, closed, float(s_grid[1] - s_grid[0]))])

    # Potential slice between one representative path from each attractor.
    first = [int(np.flatnonzero(bundle.labels == j)[0]) for j in range(2) if np.any(bundle.labels == j)]
    if len(first) == 2:
        steps = np.arange(0, len(bundle.s_grid), max(1, len(bundle.s_grid) // 50))
        alpha = np.linspace(*dyn.DEFAULT_ALPHA_RANGE, 141)
        s_sel = bundle.s_grid[steps]
        u, _ = dyn.potential_slice(bundle.paths[first[0], steps], bundle.paths[first[1], steps], alpha, s_sel, gmm, vp)
        rows = [(float(a), float(s), float(u[i, j])) for j, s in enumerate(s_sel) for i, a in enumerate(alpha)]
        _write(cfg, "slice.csv", ["alpha", "s", "u"], rows)
    else:
        log.warning("only one attractor visited; slice skipped")

    gmm2 = dyn.GMM(np.array([0.5, 0.5]), np.array([[cfg.dyn_mu, 0.5], [-cfg.dyn_mu, -0.5]]), cfg.dyn_sigma0**2)
    bundle2, _ = dyn.ensemble_run(gmm2, vp, cfg.paths, cfg.seed + 1, cfg.dyn_steps)
    proj = dyn.project_trajectories(bundle2)
    every = max(1, cfg.dyn_steps // 100)
    rows = [
        (i, int(step), float(proj[i, step, 0]), float(proj[i, step, 1]), int(bundle2.labels[i]))
        for i in range(proj.shape[0])
        for step in range(0, proj.shape[1], every)
    ]
    _write(cfg, "bundle.csv", ["path_id", "step", "comp1", "comp2", "label"], rows)
    log.info("fractions %s, tau* %.4f (closed form %.4f)", fractions, tau, closed)


def cmd_density(cfg: RunConfig, args) -> None:
    runner = _load_runner(cfg)
    rows = density_incidence(runner, UNIT_CIRCLE, cfg.eta_grid, cfg.density_trials, cfg.seed, cfg.jitter_sigma)
    _write(cfg, "density.csv", ["eta", "N", "trials", "found", "base_broken", "incidence"], [(r.eta, r.N, r.trials, r.found, r.base_broken, r.incidence) for r in rows])


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "patch-scan": cmd_patch_scan,
    "search": cmd_search,
    "rescue": cmd_rescue,
    "dynamics": cmd_dynamics,
    "density": cmd_density,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (LAB_SEED overrides)")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="meltlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="fit the toy denoiser and write a checkpoint")
    p.add_argument("--steps", dest="train_steps", type=int)
    p = sub.add_parser("sweep", parents=[common], help="C, H, r_eff and kappa along a SLERP path")
    p.add_argument("--rho-grid", type=parse_grid)
    p.add_argument("--points", dest="sweep_points", type=int)
    p = sub.add_parser("patch-scan", parents=[common], help="repair maps for each write kind")
    p.add_argument("--case-id", type=int)
    p = sub.add_parser("search", parents=[common], help="adversarial meltdown search per seed")
    p.add_argument("--seeds", dest="search_seeds", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--budget-grid", type=lambda s: tuple(int(v) for v in s.split(",")))
    p = sub.add_parser("rescue", parents=[common], help="PowerRemap on recorded cases plus the neutrality check")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gamma", type=float)
    g.add_argument("--gamma-grid", type=parse_grid)
    p = sub.add_parser("dynamics", parents=[common], help="exact-score ensemble, bifurcation, slice and PCA export")
    p.add_argument("--paths", type=int)
    p = sub.add_parser("density", parents=[common], help="meltdown incidence versus areal density")
    p.add_argument("--eta-grid", type=parse_grid)
    p.add_argument("--trials", dest="density_trials", type=int)
    return parser


_NOT_CONFIG = {"command", "config", "verbose", "case_id", "gamma"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if getattr(args, "gamma", None) is not None:
        overrides["gamma_grid"] = (args.gamma,)
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg, args)
    except (RunFailure, SearchError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
