import numpy as np
import pytest

from katana_lab.config import ModelConfig, TrainConfig, TtaConfig
from katana_lab.data import generate_synthetic
from katana_lab.network import init_model, train

TINY_SIZE = 16


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """3 classes x 10 images of 16x16 shapes."""
    return generate_synthetic(classes=3, per_class=10, size=TINY_SIZE, seed=0, name="tiny")


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(input_shape=(TINY_SIZE, TINY_SIZE, 3), num_classes=3, channels=(4,), embedding_dim=6, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_model_config):
    return init_model(tiny_model_config)


@pytest.fixture(scope="session")
def trained_tiny_model(tiny_dataset, tiny_model_config):
    train_split = tiny_dataset.subset(np.arange(24), "tiny/train")
    val_split = tiny_dataset.subset(np.arange(24, 30), "tiny/train_val")
    cfg = TrainConfig(epochs=3, batch_size=8, lr=0.05, seed=0)
    return train(train_split, val_split, cfg, model_config=tiny_model_config)


@pytest.fixture
def small_tta():
    return TtaConfig.hard(n=4)


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, size=(5, TINY_SIZE, TINY_SIZE, 3)).astype(np.float32)


LAB_YAML = """
name: unit
seed: 3
dataset: {classes: 3, train_per_class: 12, test_per_class: 8, size: 16}
split: {train_val_fraction: 0.25, test_val_count: 9}
model: {channels: [4], embedding_dim: 6}
train: {epochs: 2, batch_size: 8, lr: 0.05}
tta: {n: 4}
attacks:
  - fgsm2
  - {preset: pgd2, iterations: 2}
forest: {n_trees: 5}
logreg: {epochs: 50}
defenses: [plain, tta, katana]
ablation: {n_values: [1, 2, 4], repeats: 2, sigma_max_values: [0.0]}
ensemble_size: 2
"""


@pytest.fixture
def lab_yaml(tmp_path, monkeypatch):
    """A seconds-scale experiment config; returns its path. Outputs go under tmp_path/out."""
    for var in ("KATANA_LAB_OUTPUT_DIR", "KATANA_LAB_CACHE_DIR", "KATANA_LAB_WORKERS"):
        monkeypatch.delenv(var, raising=False)
    path = tmp_path / "lab.yaml"
    path.write_text(LAB_YAML.lstrip() + f"output_dir: {tmp_path / 'out'}\n", encoding="utf-8")
    return path
