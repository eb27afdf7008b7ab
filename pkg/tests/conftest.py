import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from gebd_ssl.data import generate_corpus, load_corpus
    root = tmp_path_factory.mktemp("corpus")
    return load_corpus(generate_corpus(root, 6, seed=3))


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
