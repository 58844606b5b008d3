import numpy as np
import pytest
import torch

from fedshield.config import LossConfig, ModelConfig, OptimConfig
from fedshield.data import ClientDataset, SampleSet
from fedshield.moe import init_client_model, local_update
from fedshield.synthetic import SyntheticSpec, generate

torch.set_num_threads(1)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(K=3, feature_dim=16, backbone_blocks=1, backbone_width=8,
                head_hidden=16, attention_hidden=8, num_classes=2)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_data():
    """Small synthetic train/test split shared across tests."""
    spec = SyntheticSpec()
    return generate(256, 7, "train", spec), generate(96, 7, "test", spec)


@pytest.fixture(scope="session")
def trained_toy_model(toy_data):
    """A small classifier trained enough to be attackable."""
    train, _ = toy_data
    cfg = tiny_model_config(feature_dim=32, backbone_width=12, head_hidden=32)
    model = init_client_model(cfg, 11)
    local_update(model, ClientDataset(train, 0), epochs=6,
                 optim_cfg=OptimConfig(lr=0.01, momentum=0.9, batch_size=64,
                                       clip_norm=1.0),
                 loss_cfg=LossConfig(beta=1e-4, gamma=0.01), seed=3)
    return model


def random_sampleset(rng: np.random.Generator, n: int = 24, size: int = 8,
                     classes: int = 2) -> SampleSet:
    images = torch.from_numpy(rng.uniform(0, 1, size=(n, 3, size, size))).float()
    labels = torch.from_numpy(rng.integers(0, classes, size=n))
    return SampleSet(images, labels)
