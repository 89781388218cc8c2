from __future__ import annotations

import numpy as np
import pytest

from bitforge.model import ModelConfig, build_model

TINY = ModelConfig(vocab_size=512, d_model=16, n_layers=2, n_heads=2, max_seq_len=32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(TINY)


@pytest.fixture
def tiny_config():
    return TINY


# Acceptance criteria report one line each; they are echoed again in the
# terminal summary so they show up without ``-s``.
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
