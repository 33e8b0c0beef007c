"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The model-backed checks use the trained toy checkpoint (``configs/toy.cfg``),
training it first through the CLI when it is missing. Set
``MELTLAB_TOY_CHECKPOINT`` to point at another checkpoint.
"""

import csv
import filecmp
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

import acceptance_checks as chk
from conftest import ACCEPTANCE_LINES
from meltlab.diffusion import Runner
from meltlab.lab.checkpoint import load_checkpoint
from meltlab.lab.config import load_config
from meltlab.net.model import Denoiser

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.cfg"
TRAIN_BUDGET_S = 15 * 60


def report(number, title, ok, detail, elapsed, limit=None):
    timing = f"{elapsed:.1f}s" + (f" (limit {limit:g}s)" if limit else "")
    within = limit is None or elapsed < limit
    verdict = "PASS" if ok and within else "FAIL"
    line = f"[{verdict}] {number}. {title}: {detail}; {timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def _cli(*args, cwd=ROOT, check=True):
    proc = subprocess.run([sys.executable, "-m", "meltlab", *args], cwd=cwd, capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"meltlab {' '.join(args)} exited {proc.returncode}: {proc.stderr[-2000:]}")
    return proc


@pytest.fixture(scope="session")
def toy_checkpoint():
    """Path to the trained toy checkpoint and the training time (None when it was cached)."""
    cfg = load_config(TOY_CONFIG)
    path = Path(os.environ.get("MELTLAB_TOY_CHECKPOINT", ROOT / cfg.checkpoint_path()))
    elapsed = None
    if not path.exists():
        start = time.perf_counter()
        _cli("train", "--config", str(TOY_CONFIG), "--checkpoint", str(path))
        elapsed = time.perf_counter() - start
    return path, elapsed


@pytest.fixture(scope="session")
def toy_model(toy_checkpoint):
    cfg = load_config(TOY_CONFIG)
    model = Denoiser(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(toy_checkpoint[0], model)
    return model


def _timed(fn, *args, **kwargs):
    start = time.perf_counter()
    ok, detail = fn(*args, **kwargs)
    return ok, detail, time.perf_counter() - start


def test_1_power_remap_entropy_monotone():
    report(1, "PowerRemap entropy suite", *_timed(chk.prop1_suite), limit=10)


def test_2_svd_oracle():
    report(2, "SVD oracle", *_timed(chk.svd_oracle), limit=30)


def test_3_autodiff_oracle():
    report(3, "autodiff oracle", *_timed(chk.autodiff_oracle), limit=60)


def test_4_patching_soundness(toy_model, toy_checkpoint):
    report(4, "patching soundness", *_timed(chk.patching_soundness, toy_model, str(toy_checkpoint[0])), limit=120)


def test_5_bifurcation_oracle():
    report(5, "bifurcation oracle", *_timed(chk.bifurcation_oracle), limit=60)


def test_6_ensemble_symmetry():
    report(6, "ensemble symmetry", *_timed(chk.ensemble_symmetry), limit=120)


def test_7_protocol_fidelity(toy_model):
    report(7, "protocol fidelity", *_timed(chk.protocol_fidelity, Runner(toy_model)), limit=300)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _pipeline(out: Path, checkpoint: Path):
    common = ["--config", str(TOY_CONFIG), "--out", str(out), "--checkpoint", str(checkpoint)]
    _cli("search", *common)
    found = [r for r in _rows(out / "search_status.csv") if r["status"] == "found"]
    if found:
        _cli("patch-scan", *common)
    _cli("rescue", *common, "--gamma-grid", "1,2,5,10,100")
    return found


def test_8_toy_demonstration(toy_checkpoint, tmp_path):
    checkpoint, train_s = toy_checkpoint
    start = time.perf_counter()
    found = _pipeline(tmp_path / "first", checkpoint)
    _pipeline(tmp_path / "second", checkpoint)
    files = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first").rglob("*.csv"))
    differing = [str(p) for p in files if not filecmp.cmp(tmp_path / "first" / p, tmp_path / "second" / p, shallow=False)]

    n_seeds = len(_rows(tmp_path / "first" / "search_status.csv"))
    rescue = _rows(tmp_path / "first" / "rescue.csv")
    neutrality = {float(r["gamma"]): r for r in _rows(tmp_path / "first" / "neutrality.csv")}
    gamma_one_rescues = [r for r in rescue if float(r["gamma"]) == 1.0 and r["rescued"] == "1"]
    # Zero healthy instances would make the control vacuous, so it counts as a failure.
    neutral_ok = 1.0 in neutrality and int(neutrality[1.0]["instances"]) > 0 and float(neutrality[1.0]["preserved"]) == 1.0
    gammas_per_case = {r["case_id"] for r in rescue}
    rescued_any = sorted({r["case_id"] for r in rescue if r["rescued"] == "1" and float(r["gamma"]) > 1})

    ok = not differing and neutral_ok and not gamma_one_rescues and len(rescue) == 5 * len(found)
    train_note = "checkpoint cached" if train_s is None else f"trained in {train_s:.0f}s ({'within' if train_s <= TRAIN_BUDGET_S else 'over'} 15 min)"
    detail = (
        f"{train_note}; cases found for {len(found)}/{n_seeds} seeds; rescued at some gamma > 1: {len(rescued_any)}/{len(gammas_per_case)}; "
        f"neutrality at gamma=1 {neutrality.get(1.0, {}).get('preserved', 'n/a')} over {neutrality.get(1.0, {}).get('instances', 0)} instances; "
        f"{len(files)} CSVs byte-identical on rerun: {not differing}"
    )
    if os.environ.get("MELTLAB_KEEP_TOY_RUN"):
        shutil.copytree(tmp_path / "first", ROOT / "runs" / "toy_acceptance", dirs_exist_ok=True)
    report(8, "toy demonstration", ok, detail, time.perf_counter() - start)
