import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from peneo.corpus import Vocab, tokenize
from peneo.decoder import build_targets
from peneo.fixtures import mini_form

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def mini():
    return mini_form()


@pytest.fixture
def mini_vocab(mini):
    return Vocab.build([mini])


@pytest.fixture
def mini_tokens(mini, mini_vocab):
    return tokenize(mini, mini_vocab)


@pytest.fixture
def mini_targets(mini, mini_tokens):
    return build_targets(mini_tokens, mini)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = getattr(sys.modules.get("test_acceptance"), "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
