import pytest
import numpy as np

from src.data import synth_corpus
from src.model import ModelConfig, init_params
from src.presets import load_scale
from src.train import TrainConfig
from tests.helpers import random_params


@pytest.fixture
def toy_config():
    return ModelConfig(depth=2, hidden=8, mlp_hidden=16, query_heads=4, attention_groups=2,
                       head_dim=2, vocab=10, context=16)


@pytest.fixture
def small_config():
    return ModelConfig(depth=4, hidden=16, mlp_hidden=32, query_heads=4, attention_groups=2,
                       head_dim=4, vocab=258, context=64)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config, seed=0)


@pytest.fixture
def noisy_params(small_config):
    return random_params(small_config, seed=3, std=0.2, dtype=np.float32)


@pytest.fixture
def corpus_a():
    return synth_corpus("A", 6000, seed=1)


@pytest.fixture
def corpus_b():
    return synth_corpus("B", 6000, seed=2)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(peak_lr=3e-3, min_lr=3e-4, warmup_steps=2, batch_size=4, seq_len=16,
                       total_tokens=4 * 16 * 10, eval_interval=5, log_interval=1, eval_batches=2)


@pytest.fixture
def smoke_scale():
    return load_scale("smoke")
