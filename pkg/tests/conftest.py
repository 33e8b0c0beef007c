import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meltlab.net import Denoiser, DenoiserConfig  # noqa: E402

SMALL = DenoiserConfig(blocks=2, field_size=16, patch=4, token_dim=16, heads=2, cond_tokens=4, cond_dim=8, timesteps=4)


def live_model(cfg: DenoiserConfig = SMALL, seed: int = 1) -> Denoiser:
    """Untrained denoiser whose zero output layer is replaced, so outputs depend on every block."""
    model = Denoiser(cfg, seed)
    rng = np.random.default_rng(seed)
    w = model.params["out.w"]
    w.data = rng.uniform(-0.5, 0.5, size=w.shape).astype(np.float32).astype(np.float64)
    return model


@pytest.fixture
def small_model():
    return live_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
