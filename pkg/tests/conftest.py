"""Shared fixtures: one pretrained desk backbone per session, plus tasks.

Pretraining is the expensive part, so it happens once and every test that
needs a frozen backbone or a briefly tuned model reuses it.
"""

import pytest

from vfpt.backbone import Backbone, BackboneConfig
from vfpt.data import FREQUENCY_BAND, SOURCE_ORIENTATION, TaskSpec
from vfpt.prompts import PromptConfig
from vfpt.training import TrainConfig, Tuner, prepare_task, pretrain

SOURCE_SEED = 100
TARGET_SEED = 200


@pytest.fixture(scope="session")
def source_task():
    return prepare_task(TaskSpec("source", SOURCE_ORIENTATION, num_classes=4,
                                 noise_std=0.1, seed=SOURCE_SEED))


@pytest.fixture(scope="session")
def desk_backbone(source_task):
    cfg = TrainConfig(epochs=15, warmup_epochs=2, base_lr=0.2, weight_decay=1e-4)
    backbone, record = pretrain(source_task, BackboneConfig(), cfg, seed=0)
    assert record.val_accuracy[-1] > 0.9, "source task should be learnable"
    return backbone


@pytest.fixture(scope="session")
def freq_task(source_task):
    return prepare_task(TaskSpec("freq", FREQUENCY_BAND, num_classes=4,
                                 noise_std=0.2, seed=TARGET_SEED),
                        stats=(source_task.mean, source_task.std))


@pytest.fixture(scope="session")
def tuned_setup(desk_backbone, freq_task):
    """A briefly tuned prompted classifier for the analysis instruments."""
    prompt_cfg = PromptConfig(prompts_per_layer=10, alpha=0.5, transform="fft")
    train_cfg = TrainConfig(epochs=4, warmup_epochs=1, base_lr=0.25,
                            weight_decay=1e-4)
    tuner = Tuner(desk_backbone, freq_task, prompt_cfg, train_cfg, seed=0)
    record = tuner.run()
    return tuner, record


@pytest.fixture(scope="session")
def frozen_tiny_backbone():
    """A small frozen backbone for cheap structural tests."""
    cfg = BackboneConfig(image_size=8, patch_size=4, channels=1, depth=2,
                         width=16, heads=2, num_classes_pretrain=3)
    backbone = Backbone(cfg, seed=5)
    backbone.freeze()
    return backbone
