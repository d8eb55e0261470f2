import numpy as np
import pytest

from skill_lab.data import CorpusSpec, build_corpus
from skill_lab.model import ModelConfig, ToySSLModel, pretrain_teacher

SMALL = ModelConfig(conv_layers=((8, 3, 2),), embed_dim=8, num_layers=2, num_heads=2, ffn_dim=6, input_dim=3, seed=3)


@pytest.fixture(scope="session")
def corpus():
    return build_corpus(CorpusSpec(num_samples=256, seq_len=64, input_dim=8, seed=0))


@pytest.fixture(scope="session")
def pretrained(corpus):
    """Toy teacher (L=4, d=32) after 2k steps of masked reconstruction."""
    model = ToySSLModel(ModelConfig())
    return pretrain_teacher(model, corpus, steps=2000, lr=2e-3)


@pytest.fixture
def teacher(pretrained):
    # fresh copy: tests may freeze or mutate it
    return pretrained.model.copy().requires_grad_(False)


@pytest.fixture
def small_model():
    return ToySSLModel(SMALL)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
