import numpy as np
import pytest

from ecgtext.datasets import GeneratorConfig, generate_corpus
from ecgtext.objectives import ObjectiveConfig
from ecgtext.training import TrainConfig, encoder_config_for


def make_tiny_dataset(n=48, seed=0, noise_sigma=0.25):
    config = GeneratorConfig(
        n=n, c=4, t=200, k_s=4, k_m=2, prevalence=(0.35,) * 4, noise_sigma=noise_sigma
    )
    return generate_corpus(config, seed=seed)


def make_tiny_encoder(dataset, **overrides):
    base = dict(p=20, d_model=16, n_heads=4, depth_ecg=1, depth_text=1, depth_dec=1, d_proj=8)
    base.update(overrides)
    return encoder_config_for(dataset, **base)


def make_tiny_train(**overrides):
    base = dict(
        objective="merit",
        epochs=2,
        batch_size=16,
        lr_max=1e-3,
        mask_ratio=0.5,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_tiny_dataset()


@pytest.fixture()
def tiny_encoder(tiny_dataset):
    return make_tiny_encoder(tiny_dataset)


@pytest.fixture()
def tiny_objective():
    return ObjectiveConfig().validate()
