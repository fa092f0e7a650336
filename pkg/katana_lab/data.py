"""
Datasets: a deterministic synthetic shapes set, the CIFAR-10 binary
format, a raw tensor export, and the stratified split protocol.

CIFAR-10 binary record: 1 label byte followed by 3072 pixel bytes
(1024 red, 1024 green, 1024 blue, each 32x32 row-major).

Raw tensor file::

    b"KTNT" | u16 version | u32 meta_len | meta JSON (name, classes)
    u32 ndim | u32 dims... | pixels (M, H, W, C), u8 or float32 per meta "pixels"
    u32 ndim | u32 dims... | u32 labels (M,)
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .config import SplitSpec
from .exceptions import DatasetError, FormatError
from .formats import BinaryReader, BinaryWriter, content_hash
from .seeding import derive_rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

RAW_MAGIC = b"KTNT"
RAW_VERSION = 1

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (M, H, W, C) in [0, 1] with integer labels. ``indices`` map rows back to the parent set."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise DatasetError(f"dataset '{self.name}': images {images.shape} do not match labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"dataset '{self.name}': labels outside [0, {self.num_classes})")
        if images.size and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"dataset '{self.name}': pixel values must be finite and in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if self.indices is not None:
            object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray, name: str) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        parent = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.images[idx], self.labels[idx], name, self.num_classes, indices=parent[idx])

    def content_id(self) -> str:
        return content_hash(content_hash(self.images).encode() + content_hash(self.labels).encode())[:16]


# --------- synthetic shapes ----------

def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    if shape == "disk":
        return r <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if shape == "triangle":
        return (v <= 0.8) & (np.abs(u) <= (v + 0.9) * 0.55)
    if shape == "cross":
        return ((np.abs(u) <= 0.25) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.25) & (np.abs(u) <= 0.95))
    if shape == "ring":
        return (r >= 0.55) & (r <= 1.0)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "hbar":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.3)
    if shape == "vbar":
        return (np.abs(v) <= 0.95) & (np.abs(u) <= 0.3)
    raise DatasetError(f"unknown shape {shape!r}")


def _render(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    radius = rng.uniform(0.35, 0.6)
    mask = _shape_mask(shape, (u - cx) / radius, (v - cy) / radius)

    fg = hsv_to_rgb([rng.uniform(0.0, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)])
    bg_level = rng.uniform(0.05, 0.35)
    img = np.full((size, size, 3), bg_level) + rng.normal(0.0, 0.02, size=(size, size, 3))
    img[mask] = fg
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(classes: int, per_class: int, size: int = 32, seed: int = 0,
                       name: Optional[str] = None) -> Dataset:
    """Balanced colored-shape images; the class is the shape, color and placement are jittered."""
    if classes < 2 or classes > len(SHAPES):
        raise DatasetError(f"classes must be in [2, {len(SHAPES)}], got {classes}")
    if size < 16:
        raise DatasetError(f"size must be >= 16, got {size}")
    if per_class < 1:
        raise DatasetError(f"per_class must be >= 1, got {per_class}")
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    labels = labels[derive_rng(seed, "synthetic", "order").permutation(labels.size)]
    images = np.stack([
        _render(SHAPES[label], size, derive_rng(seed, "synthetic", i))
        for i, label in enumerate(labels)
    ])
    return Dataset(images, labels, name or f"synthetic{classes}x{size}", classes)


# --------- CIFAR-10 binary ----------

def read_cifar10_batch(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"CIFAR-10 batch file missing: {path}")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        complete = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"file size {len(raw)} is not a multiple of {CIFAR_RECORD}; record {complete} is truncated",
            path=str(path),
            offset=complete * CIFAR_RECORD,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"label byte {labels[bad]} out of range", path=str(path), offset=bad * CIFAR_RECORD)
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pixels, labels


def write_cifar10_batch(pixels: np.ndarray, labels: np.ndarray, path: Union[str, Path]) -> None:
    """Inverse of ``read_cifar10_batch`` for uint8 pixels (M, 32, 32, 3)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    records = np.empty((pixels.shape[0], CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = pixels.transpose(0, 3, 1, 2).reshape(pixels.shape[0], -1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10_binary(dir_path: Union[str, Path], split: str = "train") -> Dataset:
    """Load the train (five batches) or test batch of the CIFAR-10 binary version, in record order."""
    files = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if files is None:
        raise DatasetError(f"split must be 'train' or 'test', got {split!r}")
    dir_path = Path(dir_path)
    missing = [f for f in files if not (dir_path / f).is_file()]
    if missing:
        raise DatasetError(f"CIFAR-10 files missing in {dir_path}: {missing}")
    parts = [read_cifar10_batch(dir_path / f) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return Dataset(pixels.astype(np.float32) / 255.0, labels, f"cifar10-{split}", 10)


# --------- raw tensor export ----------

def export_raw(ds: Dataset, path: Union[str, Path], pixels: str = "u1") -> None:
    """``pixels="u1"`` quantizes to 8 bits; ``"f4"`` keeps float32 values (adversarial images)."""
    if pixels == "u1":
        data = np.round(ds.images * 255.0).astype(np.uint8)
    elif pixels == "f4":
        data = ds.images
    else:
        raise FormatError(f"pixel encoding must be 'u1' or 'f4', got {pixels!r}", path=str(path))
    (BinaryWriter()
     .header(RAW_MAGIC, RAW_VERSION, {"name": ds.name, "num_classes": ds.num_classes, "pixels": pixels})
     .array(data, pixels)
     .array(ds.labels, "u4")
     .save(path))


def import_raw(path: Union[str, Path]) -> Dataset:
    r = BinaryReader.open(path)
    _, meta = r.header(RAW_MAGIC, (RAW_VERSION,))
    encoding = meta.get("pixels", "u1")
    if encoding not in ("u1", "f4"):
        raise FormatError(f"unknown pixel encoding {encoding!r}", path=str(path))
    pixels = r.array(encoding)
    labels = r.array("u4")
    r.expect_end()
    if pixels.ndim != 4:
        raise FormatError(f"expected a 4-d pixel tensor, got {pixels.ndim} dims", path=str(path))
    images = pixels.astype(np.float32) / 255.0 if encoding == "u1" else pixels.astype(np.float32)
    return Dataset(images, labels.astype(np.int64), meta["name"], meta["num_classes"])


# --------- splits ----------

def _stratified_counts(labels: np.ndarray, num_classes: int, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` held-out samples proportional to class sizes."""
    sizes = np.bincount(labels, minlength=num_classes).astype(np.float64)
    quota = total * sizes / sizes.sum()
    counts = np.floor(quota).astype(np.int64)
    remainder = total - counts.sum()
    # ties go to the lowest class index
    order = sorted(range(num_classes), key=lambda c: (-(quota[c] - counts[c]), c))
    for c in order[:remainder]:
        counts[c] += 1
    return np.minimum(counts, sizes.astype(np.int64))


def split(ds: Dataset, spec: SplitSpec, kind: str = "train") -> Tuple[Dataset, Dataset]:
    """
    ``kind="train"`` -> (train, train_val) holding out ``train_val_fraction``;
    ``kind="test"`` -> (test, test_val) holding out ``test_val_count`` samples.
    Stratified by label, disjoint and exhaustive, deterministic per seed.
    """
    m = len(ds)
    if kind == "train":
        held = int(round(spec.train_val_fraction * m))
        if held < 1 or held >= m:
            raise DatasetError(f"train-val fraction {spec.train_val_fraction} leaves an empty split of {m} samples")
        names = ("train", "train_val")
    elif kind == "test":
        held = spec.test_val_count
        if held >= m:
            raise DatasetError(f"test-val count {held} must be smaller than the test size {m}")
        names = ("test", "test_val")
    else:
        raise DatasetError(f"split kind must be 'train' or 'test', got {kind!r}")

    rng = derive_rng(spec.seed, "split", kind)
    counts = _stratified_counts(ds.labels, ds.num_classes, held)
    held_idx: List[np.ndarray] = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        held_idx.append(members[rng.permutation(members.size)[:counts[c]]])
    held_mask = np.zeros(m, dtype=bool)
    held_mask[np.concatenate(held_idx)] = True
    return (ds.subset(np.flatnonzero(~held_mask), f"{ds.name}/{names[0]}"),
            ds.subset(np.flatnonzero(held_mask), f"{ds.name}/{names[1]}"))
