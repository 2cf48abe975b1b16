import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ca_kit.mmdit import ModelConfig, init_weights  # noqa: E402
from ca_kit.numerics import Rng  # noqa: E402

SMALL = ModelConfig(d_model=8, n_heads=2, n_layers=3, img_h=2, img_w=2, prompt_len=3)


def random_modulation(weights, seed=0):
    """Biases are zero after init; give them values so tests cover them."""
    rng = np.random.default_rng(seed)
    for layer in weights.layers:
        for sw in (layer.img, layer.txt):
            for name in ("q_b", "k_b", "v_b", "proj_b", "mlp_b1", "mlp_b2", "mod_b"):
                getattr(sw, name)[:] = 0.3 * rng.normal(size=getattr(sw, name).shape)
    return weights


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_weights():
    return random_modulation(init_weights(SMALL, seed=11))


@pytest.fixture
def small_image():
    return Rng(5).normal("image", (SMALL.n_image_tokens, SMALL.d_model))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
