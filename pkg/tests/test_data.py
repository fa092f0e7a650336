import numpy as np
import pytest

from katana_lab.config import SplitSpec
from katana_lab.data import (
    CIFAR_RECORD,
    Dataset,
    export_raw,
    generate_synthetic,
    import_raw,
    load_cifar10_binary,
    read_cifar10_batch,
    split,
    write_cifar10_batch,
)
from katana_lab.exceptions import DatasetError, FormatError


def test_synthetic_is_balanced_and_deterministic():
    a = generate_synthetic(classes=4, per_class=6, size=16, seed=3)
    b = generate_synthetic(classes=4, per_class=6, size=16, seed=3)
    assert a.images.shape == (24, 16, 16, 3)
    assert np.bincount(a.labels).tolist() == [6, 6, 6, 6]
    assert a.content_id() == b.content_id()
    assert generate_synthetic(classes=4, per_class=6, size=16, seed=4).content_id() != a.content_id()
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


@pytest.mark.parametrize("kwargs", [{"classes": 1, "per_class": 5}, {"classes": 9, "per_class": 5},
                                    {"classes": 3, "per_class": 0}, {"classes": 3, "per_class": 2, "size": 8}])
def test_synthetic_rejects_bad_arguments(kwargs):
    with pytest.raises(DatasetError):
        generate_synthetic(**kwargs)


def test_dataset_validates_pixels_and_labels():
    with pytest.raises(DatasetError):
        Dataset(np.full((2, 4, 4, 3), 1.5), np.array([0, 1]), "bad", 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 4, 4, 3)), np.array([0, 2]), "bad", 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, 4, 4, 3)), np.array([0, 1]), "bad", 2)


def test_subset_composes_indices(tiny_dataset):
    first = tiny_dataset.subset(np.array([5, 6, 7, 8]), "first")
    second = first.subset(np.array([1, 3]), "second")
    assert second.indices.tolist() == [6, 8]
    np.testing.assert_array_equal(second.images, tiny_dataset.images[[6, 8]])


def test_train_split_is_stratified_disjoint_and_exhaustive():
    ds = generate_synthetic(classes=4, per_class=25, size=16, seed=0)
    train, held = split(ds, SplitSpec(train_val_fraction=0.2, seed=1), kind="train")
    assert len(held) == 20 and len(train) == 80
    assert np.bincount(held.labels, minlength=4).tolist() == [5, 5, 5, 5]
    assert np.intersect1d(train.indices, held.indices).size == 0
    assert sorted(np.concatenate([train.indices, held.indices]).tolist()) == list(range(100))
    assert held.name.endswith("train_val")


def test_test_split_holds_out_a_fixed_count_with_largest_remainder():
    labels = np.array([0] * 5 + [1] * 3 + [2] * 2)
    ds = Dataset(np.zeros((10, 4, 4, 3)), labels, "toy", 3)
    test, test_val = split(ds, SplitSpec(test_val_count=5, seed=0), kind="test")
    # quotas 2.5 / 1.5 / 1.0: the half-unit remainder tie goes to class 0
    assert np.bincount(test_val.labels, minlength=3).tolist() == [3, 1, 1]
    assert len(test) == 5


def test_split_is_deterministic_per_seed():
    ds = generate_synthetic(classes=3, per_class=20, size=16, seed=0)
    a = split(ds, SplitSpec(test_val_count=9, seed=2), kind="test")[1].indices
    b = split(ds, SplitSpec(test_val_count=9, seed=2), kind="test")[1].indices
    c = split(ds, SplitSpec(test_val_count=9, seed=3), kind="test")[1].indices
    np.testing.assert_array_equal(a, b)
    assert a.tolist() != c.tolist()


def test_split_rejects_impossible_sizes(tiny_dataset):
    with pytest.raises(DatasetError):
        split(tiny_dataset, SplitSpec(test_val_count=30), kind="test")
    with pytest.raises(DatasetError):
        split(tiny_dataset, SplitSpec(train_val_fraction=0.001), kind="train")
    with pytest.raises(DatasetError):
        split(tiny_dataset, SplitSpec(), kind="validation")


def _cifar_dir(tmp_path, rng, per_file=3):
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        pixels = rng.integers(0, 256, size=(per_file, 32, 32, 3), dtype=np.uint8)
        write_cifar10_batch(pixels, rng.integers(0, 10, size=per_file), tmp_path / name)
    return tmp_path


def test_cifar10_record_layout(tmp_path):
    pixels = np.zeros((1, 32, 32, 3), np.uint8)
    pixels[0, 0, 1, 0] = 200  # red plane, row 0, col 1
    pixels[0, 0, 0, 2] = 7  # blue plane, row 0, col 0
    write_cifar10_batch(pixels, [4], tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    assert len(raw) == CIFAR_RECORD
    assert raw[0] == 4 and raw[2] == 200 and raw[1 + 2048] == 7
    read_pixels, labels = read_cifar10_batch(tmp_path / "b.bin")
    np.testing.assert_array_equal(read_pixels, pixels)
    assert labels.tolist() == [4]


def test_cifar10_truncated_file_reports_offset(tmp_path, rng):
    write_cifar10_batch(rng.integers(0, 256, size=(2, 32, 32, 3)), [1, 2], tmp_path / "b.bin")
    data = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(data[:-10])
    with pytest.raises(FormatError) as info:
        read_cifar10_batch(tmp_path / "b.bin")
    assert info.value.offset == CIFAR_RECORD


def test_cifar10_bad_label_byte(tmp_path):
    record = bytes([12]) + bytes(CIFAR_RECORD - 1)
    (tmp_path / "b.bin").write_bytes(record)
    with pytest.raises(FormatError):
        read_cifar10_batch(tmp_path / "b.bin")


def test_load_cifar10_binary(tmp_path, rng):
    root = _cifar_dir(tmp_path, rng)
    train = load_cifar10_binary(root, "train")
    test = load_cifar10_binary(root, "test")
    assert len(train) == 15 and len(test) == 3
    assert train.num_classes == 10
    assert train.images.max() <= 1.0
    (root / "data_batch_3.bin").unlink()
    with pytest.raises(DatasetError, match="data_batch_3"):
        load_cifar10_binary(root, "train")


def test_raw_export_quantizes_or_keeps_floats(tmp_path, tiny_dataset):
    export_raw(tiny_dataset, tmp_path / "u8.bin")
    back = import_raw(tmp_path / "u8.bin")
    assert np.abs(back.images - tiny_dataset.images).max() <= 0.5 / 255 + 1e-6
    np.testing.assert_array_equal(back.labels, tiny_dataset.labels)

    export_raw(tiny_dataset, tmp_path / "f4.bin", pixels="f4")
    np.testing.assert_array_equal(import_raw(tmp_path / "f4.bin").images, tiny_dataset.images)


def test_raw_import_rejects_other_formats(tmp_path, tiny_dataset):
    export_raw(tiny_dataset, tmp_path / "ok.bin")
    data = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"KTNM" + data[4:])
    with pytest.raises(FormatError):
        import_raw(tmp_path / "bad.bin")
