import numpy as np
import pytest

from tosa.model import ModelConfig, init_model
from tosa.tosa_layer import SkipScope


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough that a forward pass takes milliseconds."""
    return ModelConfig(image_size=16, patch_size=4, channels=3, dim=16, heads=2, depth=4,
                       num_classes=4, tosa_layers=(2, 4), ratio=0.8, scope=SkipScope.ATTENTION_ONLY)


@pytest.fixture
def tiny_state(tiny_config):
    return init_model(tiny_config, seed=7)


@pytest.fixture
def tiny_images(rng, tiny_config):
    c = tiny_config
    return rng.standard_normal((5, c.channels, c.image_size, c.image_size))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one summary line per acceptance criterion; printed at the end of the run."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
