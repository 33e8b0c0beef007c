import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import SMALL, live_model
from meltlab.lab.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from meltlab.lab.cli import main
from meltlab.lab.config import ConfigError, RunConfig, load_config, parse_config_text, parse_grid
from meltlab.lab.csvio import read_csv, write_csv
from meltlab.net.model import Denoiser, DenoiserConfig, to_float32_grid

SMALL_KEYS = """\
blocks = 2
field_size = 16
token_dim = 16
heads = 2
cond_tokens = 4
cond_dim = 8
timesteps = 4
"""


def test_parse_grid_forms():
    grid = parse_grid("0:0.05:1")
    assert len(grid) == 21 and grid[0] == 0.0 and grid[-1] == 1.0 and grid[1] == 0.05
    assert parse_grid("1, 2.5,100") == (1.0, 2.5, 100.0)
    for bad in ("0:0.3:1", "1:0.1:0", "0:1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_config_text_parsing():
    values = parse_config_text("# comment\nseed = 7  # trailing\nrho_grid = 0:0.5:1\nsampler = ddpm\npatch_kinds = ca, mlp\npolicy_block = none\n")
    assert values == {"seed": 7, "rho_grid": (0.0, 0.5, 1.0), "sampler": "ddpm", "patch_kinds": ("ca", "mlp"), "policy_block": None}


@pytest.mark.parametrize(
    "text,match",
    [("sede = 3", "unknown key"), ("seed 3", "key = value"), ("seed = x", "bad value"), ("patch_kinds = ca,attn", "unknown site kind")],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_config_invariants():
    with pytest.raises(ConfigError):
        RunConfig(rho_grid=())
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    with pytest.raises(ConfigError):
        RunConfig(sampler="euler")
    with pytest.raises(ConfigError):
        RunConfig(token_dim=30)
    assert RunConfig(seed=2**64 - 1).seed == 2**64 - 1


def test_load_config_layering(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\ncfg_scale = 2.0\n", encoding="utf-8")
    cfg = load_config(path, {"cfg_scale": None, "paths": 10}, env={})
    assert (cfg.seed, cfg.cfg_scale, cfg.paths) == (3, 2.0, 10)
    assert load_config(path, {"seed": 4}, env={"LAB_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        load_config(path, env={"LAB_SEED": "eleven"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg", env={})


def test_config_sha_tracks_values():
    assert RunConfig().sha() == RunConfig().sha()
    assert RunConfig().sha() != RunConfig(seed=1).sha()


def test_csv_provenance_and_append(tmp_path):
    path = tmp_path / "out.csv"
    write_csv(path, ["a", "b"], [(1, 0.1), (2, True)], seed=5, config_sha="abc")
    write_csv(path, ["a", "b"], [(3, 1e-17)], seed=5, config_sha="abc", append=True)
    assert path.read_text().splitlines() == ["# seed=5 config_sha=abc", "a,b", "1,0.1", "2,1", "3,1e-17"]
    comment, rows = read_csv(path)
    assert comment.startswith("# seed=5") and rows[2] == {"a": "3", "b": "1e-17"}
    with pytest.raises(ValueError):
        write_csv(path, ["x"], [], seed=5, config_sha="abc", append=True)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    model = live_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    other = load_checkpoint(path, Denoiser(SMALL, 99))
    for name, p in model.params.items():
        assert np.array_equal(p.data, other.params[name].data)
    assert path.read_bytes()[:8] == MAGIC
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_rejects_defects(tmp_path):
    model = live_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()

    (tmp_path / "trunc.ckpt").write_bytes(blob[: len(blob) // 2])
    target = Denoiser(SMALL, 5)
    before = target.state()
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt", target)
    assert all(np.array_equal(before[k], p.data) for k, p in target.params.items())

    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "magic.ckpt")

    (tmp_path / "ver.ckpt").write_bytes(blob[:8] + (2).to_bytes(4, "little") + blob[12:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "ver.ckpt")

    (tmp_path / "tail.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "tail.ckpt")

    other_cfg = DenoiserConfig(blocks=3, field_size=16, patch=4, token_dim=16, heads=2, cond_tokens=4, cond_dim=8, timesteps=4)
    with pytest.raises(CheckpointError, match=f"{SMALL.fingerprint()}.*{other_cfg.fingerprint()}"):
        load_checkpoint(path, Denoiser(other_cfg, 0))


def test_checkpoint_refuses_unrepresentable_values(tmp_path):
    model = live_model()
    model.params["embed.b"].data = model.params["embed.b"].data + 1e-12
    assert not np.array_equal(model.params["embed.b"].data, to_float32_grid(model.params["embed.b"].data))
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", model)


# -- CLI -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny config and a few-step checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(
        SMALL_KEYS
        + "train_steps = 3\nbatch = 4\nrho_grid = 0, 0.5, 1\nsweep_points = 6\nspectral_block = 1\nspectral_timestep = 4\n"
        + "budget_grid = 4, 8\nsearch_seeds = 0\nneutrality_seeds = 2\nneutrality_gammas = 1, 100\n"
        + "paths = 20\ndyn_steps = 50\neta_grid = 1\ndensity_trials = 1\n",
        encoding="utf-8",
    )
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root


def _bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*.csv"))}


@pytest.mark.parametrize("command", ["sweep", "search", "rescue", "dynamics", "density"])
def test_subcommands_rerun_byte_identical(trained, tmp_path, command):
    cfg, root = trained
    ckpt = str(root / "run" / "model.ckpt")
    outs = []
    for i in range(2):
        out = tmp_path / f"o{i}"
        if command == "rescue":
            assert main(["search", "--config", str(cfg), "--out", str(out), "--checkpoint", ckpt]) == 0
        assert main([command, "--config", str(cfg), "--out", str(out), "--checkpoint", ckpt]) == 0
        outs.append(_bytes(out))
    assert outs[0] and outs[0] == outs[1]
    for body in outs[0].values():
        assert body.startswith(b"# seed=0 config_sha=")


def test_train_writes_loss_curve(trained):
    _, root = trained
    comment, rows = read_csv(root / "run" / "train_loss.csv")
    assert len(rows) == 3 and comment.startswith("# seed=")


def test_sweep_csv_columns(trained, tmp_path):
    cfg, root = trained
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", str(root / "run" / "model.ckpt")]) == 0
    _, rows = read_csv(tmp_path / "sweep.csv")
    assert [float(r["rho"]) for r in rows] == [0.0, 0.5, 1.0]
    assert all(abs(float(r["r_eff"]) - np.exp(float(r["H"]))) <= 1e-12 for r in rows)


def test_exit_codes(tmp_path, capsys):
    assert main(["bogus"]) == 2
    assert main(["sweep", "--no-such-flag"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["sweep", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["sweep", "--out", str(tmp_path / "empty")]) == 1
    assert "no checkpoint" in capsys.readouterr().err


def test_patch_scan_without_cases_fails_cleanly(trained, tmp_path, capsys):
    cfg, root = trained
    assert main(["patch-scan", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", str(root / "run" / "model.ckpt")]) == 1
    assert "no meltdown case" in capsys.readouterr().err


def test_lab_seed_environment_override(trained, tmp_path):
    cfg, root = trained
    env = dict(os.environ, LAB_SEED="5")
    cmd = [sys.executable, "-m", "meltlab", "dynamics", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"]
    subprocess.run(cmd, env=env, check=True, capture_output=True)
    assert (tmp_path / "ensemble.csv").read_text().startswith("# seed=5 ")
