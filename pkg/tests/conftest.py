import numpy as np
import pytest

from slmkit.encoder import EncoderConfig
from slmkit.model import ModelConfig
from slmkit.tasks import AudioConfig, Renderer, ToyTaskSpec, build_vocab, gen_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    """Small enough for exhaustive gradient checks and sub-second training steps."""
    enc = EncoderConfig(num_layers=2, feature_dim=8, num_heads=2, ff_dim=16, raw_dim=8)
    opts = dict(encoder=enc, d_model=16, lm_encoder_layers=1, lm_decoder_layers=1, lm_heads=2,
                lm_ff_dim=32, lora_rank=2)
    opts.update(overrides)
    return ModelConfig(**opts)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def tiny_renderer():
    return Renderer(AudioConfig(raw_dim=8))


def tiny_corpus(task, renderer, n_train=8, seed=0, **spec):
    return gen_corpus(ToyTaskSpec(task, n_train=n_train, n_valid=2, n_test=4, **spec),
                      np.random.default_rng(seed), renderer)
