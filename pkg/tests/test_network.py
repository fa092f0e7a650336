import numpy as np
import pytest

from katana_lab.autodiff import softmax
from katana_lab.config import ModelConfig, TrainConfig
from katana_lab.data import Dataset
from katana_lab.exceptions import FormatError, ShapeError, TrainingError
from katana_lab.network import (
    TrainedModel,
    accuracy,
    extract_features,
    init_model,
    load,
    predict_logits,
    save,
    sgd_step,
    train,
)


def test_init_is_deterministic_per_seed(tiny_model_config):
    a = init_model(tiny_model_config)
    b = init_model(tiny_model_config)
    assert a.model_id == b.model_id
    assert init_model(ModelConfig(**{**tiny_model_config.to_dict(), "seed": 4})).model_id != a.model_id


def test_forward_features_shapes(tiny_model, images):
    logits, embeddings = tiny_model.forward_features(images)
    assert logits.shape == (5, 3)
    assert embeddings.shape == (5, 6)
    assert np.all(embeddings >= 0)


def test_single_image_is_promoted_to_batch(tiny_model, images):
    np.testing.assert_array_equal(predict_logits(tiny_model, images[0]), predict_logits(tiny_model, images[:1]))


def test_wrong_image_shape_raises(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.forward_features(np.zeros((2, 8, 8, 3), np.float32))


def test_extract_features_kinds(tiny_model, images):
    probs = extract_features(tiny_model, images, "probs")
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)
    np.testing.assert_array_equal(extract_features(tiny_model, images, "logits"), predict_logits(tiny_model, images))
    assert extract_features(tiny_model, images, "embeddings").shape == (5, 6)


def test_per_sample_gradients_do_not_mix(tiny_model, images):
    labels = np.array([0, 1, 2, 0, 1])
    losses, grads = tiny_model.loss_and_input_grad(images, labels)
    alone_loss, alone_grad = tiny_model.loss_and_input_grad(images[2:3], labels[2:3])
    assert losses.shape == (5,)
    np.testing.assert_allclose(losses[2], alone_loss[0], rtol=1e-5)
    np.testing.assert_allclose(grads[2], alone_grad[0], rtol=1e-4, atol=1e-7)


def test_sgd_step_plain_momentum():
    weights = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.5])}
    velocity = {}
    cfg = TrainConfig(momentum=0.5, nesterov=False, weight_decay=0.0)
    sgd_step(weights, grads, velocity, 0.1, cfg)
    np.testing.assert_allclose(weights["w"], [0.95, -2.05])
    sgd_step(weights, grads, velocity, 0.1, cfg)
    # v = 0.5 * 0.5 + 0.5
    np.testing.assert_allclose(weights["w"], [0.875, -2.125])


def test_training_returns_new_model_and_records_history(tiny_dataset, tiny_model_config, tiny_model):
    before = {k: v.copy() for k, v in tiny_model.weights.items()}
    train_split = tiny_dataset.subset(np.arange(24), "train")
    val_split = tiny_dataset.subset(np.arange(24, 30), "train_val")
    trained = train(train_split, val_split, TrainConfig(epochs=2, batch_size=8, seed=1), model=tiny_model)
    assert trained.model_id != tiny_model.model_id
    for name, value in before.items():
        np.testing.assert_array_equal(tiny_model.weights[name], value)
    assert trained.info.epochs_run == 2
    assert len(trained.info.history) == 2
    assert 0.0 <= trained.info.train_accuracy <= 100.0


def test_training_is_reproducible(tiny_dataset, tiny_model_config):
    train_split = tiny_dataset.subset(np.arange(24), "train")
    val_split = tiny_dataset.subset(np.arange(24, 30), "train_val")
    cfg = TrainConfig(epochs=1, batch_size=8, seed=5)
    a = train(train_split, val_split, cfg, model_config=tiny_model_config)
    b = train(train_split, val_split, cfg, model_config=tiny_model_config)
    assert a.model_id == b.model_id


def test_zero_epochs_copies_weights(tiny_dataset, tiny_model):
    trained = train(tiny_dataset.subset(np.arange(20), "a"), tiny_dataset.subset(np.arange(20, 30), "b"),
                    TrainConfig(epochs=0), model=tiny_model)
    assert trained.model_id == tiny_model.model_id
    assert trained.weights["embed_w"] is not tiny_model.weights["embed_w"]


def test_empty_or_overlapping_splits_are_rejected(tiny_dataset, tiny_model):
    with pytest.raises(TrainingError):
        train(tiny_dataset.subset(np.arange(0), "empty"), tiny_dataset, TrainConfig(epochs=1), model=tiny_model)
    with pytest.raises(TrainingError):
        train(tiny_dataset.subset(np.arange(0, 20), "a"), tiny_dataset.subset(np.arange(15, 30), "b"),
              TrainConfig(epochs=1), model=tiny_model)


def test_accuracy_is_a_percentage(trained_tiny_model, tiny_dataset):
    acc = accuracy(trained_tiny_model, tiny_dataset)
    expected = np.mean(trained_tiny_model.predict(tiny_dataset.images) == tiny_dataset.labels) * 100
    assert acc == pytest.approx(expected)


def test_save_load_keeps_weights_and_info(tmp_path, trained_tiny_model):
    path = tmp_path / "model.bin"
    save(trained_tiny_model, path)
    loaded = load(path, num_classes=3)
    assert loaded.model_id == trained_tiny_model.model_id
    assert loaded.info.epochs_run == trained_tiny_model.info.epochs_run
    assert path.read_bytes()[:4] == b"KTNM"


def test_load_rejects_class_mismatch_and_truncation(tmp_path, tiny_model):
    path = tmp_path / "model.bin"
    save(tiny_model, path)
    with pytest.raises(FormatError):
        load(path, num_classes=10)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError) as info:
        load(path)
    assert info.value.offset is not None


def test_load_rejects_foreign_magic(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load(path)


def test_sgd_step_nesterov_momentum():
    weights = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.5])}
    velocity = {}
    cfg = TrainConfig(momentum=0.5, nesterov=True, weight_decay=0.0)
    sgd_step(weights, grads, velocity, 0.1, cfg)
    # step = g + momentum * v with v = 0.5
    np.testing.assert_allclose(weights["w"], [0.925, -2.075])
    sgd_step(weights, grads, velocity, 0.1, cfg)
    np.testing.assert_allclose(weights["w"], [0.8375, -2.1625])


def test_weight_decay_shrinks_weights_without_gradient():
    weights = {"w": np.array([2.0, -4.0, 0.5])}
    cfg = TrainConfig(momentum=0.9, nesterov=False, weight_decay=0.1)
    sgd_step(weights, {}, {}, 0.1, cfg)
    np.testing.assert_allclose(weights["w"], np.array([2.0, -4.0, 0.5]) * 0.99)


def test_learning_rate_decays_after_a_plateau(monkeypatch, tiny_dataset, tiny_model):
    train_split = tiny_dataset.subset(np.arange(24), "train")
    val_split = tiny_dataset.subset(np.arange(24, 30), "train_val")
    scores = iter([50.0, 60.0, 60.0, 60.0, 60.0])

    def fake_accuracy(model, ds):
        return next(scores) if ds.name == "train_val" else 100.0

    monkeypatch.setattr("katana_lab.network.accuracy", fake_accuracy)
    cfg = TrainConfig(epochs=5, batch_size=30, lr=0.1, lr_decay=0.5, patience=2, seed=0)
    trained = train(train_split, val_split, cfg, model=tiny_model)
    lrs = [h["lr"] for h in trained.info.history]
    np.testing.assert_allclose(lrs, [0.1, 0.1, 0.1, 0.05, 0.05])
    assert trained.info.final_lr == pytest.approx(0.05)
    assert trained.info.train_accuracy == 100.0


def _two_channel_set(rng, per_class, name):
    labels = np.repeat([0, 1], per_class)
    images = np.full((2 * per_class, 8, 8, 2), 0.1, np.float32)
    images[np.arange(labels.size), :, :, labels] = 0.9
    images += rng.uniform(-0.05, 0.05, size=images.shape).astype(np.float32)
    return Dataset(np.clip(images, 0.0, 1.0), labels, name, 2)


def test_separable_two_class_set_is_learned_in_ten_epochs(rng):
    train_split = _two_channel_set(rng, 20, "train")
    val_split = _two_channel_set(rng, 5, "train_val")
    config = ModelConfig(input_shape=(8, 8, 2), num_classes=2, channels=(4,), embedding_dim=8, seed=0)
    trained = train(train_split, val_split, TrainConfig(epochs=10, batch_size=8, seed=0), model_config=config)
    assert trained.info.train_accuracy == 100.0


def test_probs_are_the_softmax_of_logits(tiny_model, images):
    logits = extract_features(tiny_model, images, "logits").astype(np.float64)
    probs = extract_features(tiny_model, images, "probs")
    np.testing.assert_allclose(probs, softmax(logits, axis=1), atol=1e-6)


def test_zero_output_layer_gives_zero_logits(tiny_model, images):
    weights = dict(tiny_model.weights)
    weights["logits_w"] = np.zeros_like(weights["logits_w"])
    weights["logits_b"] = np.zeros_like(weights["logits_b"])
    np.testing.assert_array_equal(predict_logits(TrainedModel(tiny_model.config, weights), images), 0.0)


def test_identical_images_give_identical_rows(tiny_model, images):
    batch = np.repeat(images[:1], 4, axis=0)
    for kind in ("logits", "probs", "embeddings"):
        rows = extract_features(tiny_model, batch, kind)
        np.testing.assert_allclose(rows, np.repeat(rows[:1], 4, axis=0), rtol=1e-6, atol=1e-7)
