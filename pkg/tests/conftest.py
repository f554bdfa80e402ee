import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import Config, PANetConfig, TrainConfig, resolve_run_config  # noqa: E402
from shapegen import MultiViewSample, build_dataset, sample_viewpoints_random  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_runs_dir(tmp_path, monkeypatch):
    """Commands without --out record their manifests under a per-test runs directory"""
    monkeypatch.setattr(Config, "RUNS_DIR", str(tmp_path / "runs"))


@pytest.fixture
def tiny_config() -> PANetConfig:
    return resolve_run_config("tiny").network


@pytest.fixture
def quiet_train_config() -> TrainConfig:
    """Deterministic, augmentation-free training settings for small tests"""
    return TrainConfig(epochs=1, batch_size=2, augment=False, smoothing=0.0, weight_decay=0.0)


def make_sample(config: PANetConfig, views: int, seed: int = 0, label: int = 0) -> MultiViewSample:
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (views, config.resolution, config.resolution)).astype(np.float32)
    return MultiViewSample(views=images, viewpoints=sample_viewpoints_random(views, seed), label=label)


@pytest.fixture
def tiny_dataset(tiny_config):
    return build_dataset("arbitrary", 2, num_classes=tiny_config.num_classes,
                         resolution=tiny_config.resolution, seed=3)
