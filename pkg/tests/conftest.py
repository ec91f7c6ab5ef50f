"""Shared desk-scale fixtures: one dataset, one base model, one sweep.

Session-scoped so the (cheap) training runs happen once per test run.
Tests that need different data or hypers build their own locally.
"""

from __future__ import annotations

import pytest

from soupkit import datagen, trainer
from soupkit.tinynet import ArchSpec


@pytest.fixture(scope="session")
def desk_dataset():
    cfg = datagen.DatasetConfig(
        input_dim=8,
        num_classes=4,
        num_train=256,
        num_val=192,
        num_test=160,
        num_shift=160,
        class_center_scale=1.5,
        within_class_std=1.0,
        seed=7,
    )
    return datagen.generate(cfg)


@pytest.fixture(scope="session")
def desk_base(desk_dataset):
    arch = ArchSpec((8, 16, 4))
    cfg = trainer.HyperConfig(
        learning_rate=0.01, weight_decay=1e-4, epochs=3, batch_size=64, seed=11
    )
    return trainer.pretrain(arch, desk_dataset, cfg)


@pytest.fixture(scope="session")
def desk_models(desk_base, desk_dataset):
    """Five fine-tunes of the shared base, varied lr / seed / smoothing."""
    recipes = [
        (0.02, 1, 0.0),
        (0.01, 2, 0.1),
        (0.005, 3, 0.0),
        (0.02, 4, 0.05),
        (0.01, 5, 0.0),
    ]
    models = []
    for lr, seed, smooth in recipes:
        h = trainer.HyperConfig(
            learning_rate=lr,
            weight_decay=1e-4,
            epochs=3,
            batch_size=64,
            seed=seed,
            label_smoothing=smooth,
        )
        models.append(trainer.finetune(desk_base, h, desk_dataset).checkpoint)
    return models
