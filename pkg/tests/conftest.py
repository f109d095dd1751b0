import numpy as np
import pytest

from epinorm import synth


@pytest.fixture(scope="session")
def noisy_samples():
    return synth.make_samples(synth.SceneConfig(noise_sigma_px=1.0), 40, seed=11)


@pytest.fixture(scope="session")
def clean_samples():
    return synth.make_samples(synth.SceneConfig(noise_sigma_px=0.0), 20, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
