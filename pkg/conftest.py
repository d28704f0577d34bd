"""
Shared fixtures: a tiny model config, a tiny synthetic task and recipe
"""

import os

import pytest
import torch

from app.models import ModelConfig, SyntheticTaskSpec, TrainRecipe


def pytest_collection_modifyitems(config, items):
    if os.getenv("ARWKV_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set ARWKV_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(
        embed_dim=16,
        depth=2,
        head_dim=8,
        patch=(4, 4),
        input_size=(8, 16),
        num_classes=3,
    )


@pytest.fixture
def tiny_task() -> SyntheticTaskSpec:
    return SyntheticTaskSpec(num_classes=3, n_mels=8, n_frames=16, snr_db=20.0, seed=0, n_train=24, n_val=12)


@pytest.fixture
def tiny_recipe() -> TrainRecipe:
    return TrainRecipe(base_lr=1e-3, batch_size=8, total_steps=4, precision="f64", eval_every=2)


@pytest.fixture
def gen() -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(1234)
    return generator
