import sys
import numpy as np
import pytest

from attnguide.vit import ModelConfig, random_weights
from attnguide.synthetic import planted

TINY = ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=2, num_heads=2,
                   num_classes=10)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_weights():
    return random_weights(TINY, seed=7)


@pytest.fixture(scope="session")
def planted_w():
    return planted(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
