import numpy as np
import pytest

from upq import corpus
from upq.model import ModelConfig, ToyLM


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(dim=32, n_layers=2, n_heads=2, context_length=32, mlp_mult=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return ToyLM(tiny_cfg)


@pytest.fixture
def tiny_splits(tiny_cfg):
    text = corpus.synthetic_text(60_000, seed=3)
    ids = corpus.tokenize(text)
    return corpus.pack(ids, tiny_cfg.context_length, seed=0)


def random_weights(rng, m=16, n=24, scale=0.05, dtype=np.float32):
    W = rng.normal(0.0, scale, size=(m, n)).astype(dtype)
    delta = (np.abs(W).max(axis=1) + 1e-4).astype(dtype)
    return W, delta
