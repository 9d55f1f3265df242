import numpy as np
import pytest

from wkbp.model import ModelConfig
from wkbp.signals import segment_record
from wkbp.windkessel import synth_dataset


@pytest.fixture(scope="session")
def small_synth():
    return synth_dataset(4, 12, noise_std=0.0, seed=11)


@pytest.fixture(scope="session")
def small_beats(small_synth):
    beats = []
    for rec in small_synth.records:
        beats.extend(segment_record(rec).beats)
    return beats


@pytest.fixture
def tiny_config():
    return ModelConfig(latent_dim=6, f_comp_hidden=5, decoder_hidden=4, ode_steps=3, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
