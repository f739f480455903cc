"""Shared fixtures: a miniature dataset bundle and quickly trained models."""
from dataclasses import replace

import numpy as np
import pytest

from finemine.model import TrainConfig, init, train, smooth_targets
from finemine.synth import GenSpec, generate


TINY_SPEC = GenSpec(
    num_inclass_classes=4,
    num_outclass_classes=4,
    image_size=32,
    labeled_train=40,
    validation=20,
    inclass_unlabeled=60,
    outclass_unlabeled=60,
    test=30,
    seed=0,
)

TINY_TRAIN = TrainConfig(
    epochs=8,
    batch_size=8,
    base_lr=0.3,
    warmup_epochs=2,
    seed=0,
)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_model(tiny_bundle):
    """One classifier trained a few epochs on the tiny labeled split."""
    cfg = TINY_TRAIN
    n = tiny_bundle.num_inclass_classes
    data = [
        (ex, smooth_targets(ex.label, n, cfg.label_smooth_eps))
        for ex in tiny_bundle.labeled_train
    ]
    model, _ = train(init(n, 0, cfg.crop_size), data, cfg)
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
