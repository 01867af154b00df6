import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskdistill.models import DenoiserModel, DiscriminatorConfig, DiscriminatorModel, ModelConfig

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=6, length=5, d_model=8, n_layers=1, n_heads=2, init_std=0.3)


@pytest.fixture
def tiny_model(tiny_config):
    return DenoiserModel(tiny_config, seed=3)


@pytest.fixture
def tiny_disc(tiny_config):
    c = tiny_config
    return DiscriminatorModel(DiscriminatorConfig(c.vocab_size, c.length, c.d_model, c.n_layers,
                                                  c.n_heads, init_std=c.init_std), seed=4)


def random_tokens(rng, shape, k, mask_index, p_mask=0.5):
    x = rng.integers(0, k - 1, shape)
    return np.where(rng.random(shape) < p_mask, mask_index, x)
