import numpy as np
import pytest

from dlab.curriculum import pretrain_base
from dlab.model import ModelConfig, init_model

TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_hidden=16, vocab_size=16, n_visual=2, d_visual=4)

_BASES = {}


def base_model(seed: int = 0):
    """Pre-trained stage-0 model, built once per seed for the whole session."""
    if seed not in _BASES:
        _BASES[seed] = pretrain_base(ModelConfig(), seed)
    return _BASES[seed].copy()


@pytest.fixture(scope="session")
def base0():
    return base_model(0)


@pytest.fixture
def tiny_model():
    return init_model(TINY, np.random.default_rng(0))


@pytest.fixture
def toy_model():
    return init_model(ModelConfig(), np.random.default_rng(0))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
