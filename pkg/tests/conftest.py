import numpy as np
import pytest

from hornn.corpus import build_vocab
from hornn.model import HornnConfig, Parameters, init_params

POOLINGS = ("plain", "max", "fofe", "gated")


def tiny_config(**overrides) -> HornnConfig:
    base = dict(vocab=11, order=3, hidden=7, pooling="plain", precision=64, seed=3)
    base.update(overrides)
    return HornnConfig(**base)


def zero_params(cfg: HornnConfig) -> Parameters:
    return init_params(cfg).map(np.zeros_like)


@pytest.fixture
def periodic_corpus():
    tokens = "a b c d".split() * 500
    vocab = build_vocab(tokens)
    return vocab, vocab.encode(tokens)
