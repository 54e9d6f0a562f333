import numpy as np
import pytest

from lora_erasure.diffusion import BaseTrainingConfig, Denoiser, make_world, train_base
from lora_erasure.training import TrainingConfig, train_scope


@pytest.fixture(scope="session")
def world():
    return make_world()


@pytest.fixture(scope="session")
def base(world):
    """The default base denoiser (3000 steps, seed 0), trained once per session."""
    return train_base(world, BaseTrainingConfig(seed=0))


@pytest.fixture(scope="session")
def adapters(world, base):
    """Default-config adapters for all 8 concepts, keyed by concept."""
    ads, _ = train_scope(world, base, range(world.n_concepts), TrainingConfig(seed=0))
    return {a.concept: a for a in ads}


@pytest.fixture
def small_denoiser():
    """An untrained frozen denoiser, enough for shape and identity checks."""
    return Denoiser.create(4, np.random.default_rng(0), T=20, hidden=8).freeze()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts in one block at the end of the run."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
