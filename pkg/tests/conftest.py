import numpy as np
import pytest

from depthscope.corpus import PromptRecord, byte_tokenize
from depthscope.model import ModelConfig, init_random, preset


def small_config(n_layers=2, d_model=16, vocab=19, q=4, kv=2, d_ff=24):
    return ModelConfig(n_layers, d_model, q, kv, d_ff, vocab)


@pytest.fixture(scope="session")
def tiny_weights():
    return init_random(preset("tiny"), seed=0)


@pytest.fixture(scope="session")
def small_weights():
    return init_random(small_config(n_layers=3), seed=1)


def answered(text, answer, rid="r0", dataset="toy"):
    ids = byte_tokenize(text)
    ans = byte_tokenize(answer)[1:-1]
    start = len(ids) - 1
    return PromptRecord(rid, ids[:-1] + ans + ids[-1:], start, start + len(ans), dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
