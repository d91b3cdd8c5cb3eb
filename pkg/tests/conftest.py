from __future__ import annotations

import numpy as np
import pytest

from neuron_alloc.data import SyntheticTaskSpec, synthetic_corpora
from neuron_alloc.model import ModelConfig, build_model, make_batch

PAIRS = ("src2cp", "src2rv", "src2sh")


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_layers=1, d_model=8, num_heads=2, d_ffn=16, vocab_size=24, max_seq_len=16,
                language_pairs=PAIRS)
    base.update(overrides)
    return ModelConfig(**base)


def small_spec(**overrides) -> SyntheticTaskSpec:
    base = dict(base_vocab=8, min_len=2, max_len=5, sizes=(("train", 60), ("dev", 12), ("test", 12)), seed=3)
    base.update(overrides)
    return SyntheticTaskSpec(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=11)


@pytest.fixture
def tiny_model64():
    return build_model(tiny_config(), seed=11, dtype=np.float64)


@pytest.fixture
def small_task():
    vocab, corpora = synthetic_corpora(small_spec())
    return vocab, corpora


@pytest.fixture
def small_model(small_task):
    vocab, corpora = small_task
    cfg = tiny_config(vocab_size=len(vocab), language_pairs=tuple(sorted(corpora)))
    return build_model(cfg, seed=5)


def toy_batch(pair: str = "src2cp", lang: int = 3):
    sources = [[lang, 5, 6, 7], [lang, 8, 9]]
    targets = [[5, 6, 7], [9, 8, 10, 11]]
    return make_batch(pair, sources, targets)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
