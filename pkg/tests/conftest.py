import numpy as np
import pytest

from letlab.data import MarkovSpec, gen_markov_corpus
from letlab.models import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=16, hidden_size=16, intermediate_size=32,
                num_layers=4, num_heads=2, max_seq_len=64)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def cycle_corpus():
    return gen_markov_corpus(MarkovSpec.cycle(16, seed=3), 40_000)


@pytest.fixture(scope="session")
def two_state_spec():
    return MarkovSpec(order=1, table=[[0.9, 0.1], [0.1, 0.9]], seed=7)


@pytest.fixture(scope="session")
def two_state_corpus(two_state_spec):
    return gen_markov_corpus(two_state_spec, 60_000)


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
