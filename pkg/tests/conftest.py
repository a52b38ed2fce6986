import numpy as np
import pytest

from taskemb.encoder import EncoderModel, ModelConfig
from taskemb.tokenizer import build_vocab

TINY_TEXTS = [
    "alpha beta gamma delta epsilon",
    "zeta eta theta iota kappa",
    "lambda mu nu xi omicron pi",
    "rho sigma tau upsilon phi chi",
]


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_size=64, d_model=16, n_layers=2, n_heads=2, d_ff=32,
        max_seq_len=16, mrl_dims=(4, 8, 16), seed=7,
    )


@pytest.fixture
def tiny_model(tiny_config):
    vocab = build_vocab(TINY_TEXTS, max_size=tiny_config.vocab_size)
    return EncoderModel(tiny_config, vocab=vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
