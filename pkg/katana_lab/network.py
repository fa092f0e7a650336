"""
Small convolutional classifier built on ``katana_lab.autodiff``.

Architecture: per channel width, conv3x3 -> relu -> conv3x3 -> relu -> 2x2
average pool; then global average pool -> dense embedding -> relu -> dense
logits. Training is SGD with (Nesterov) momentum, L2 weight decay and a
learning rate that decays whenever train-val accuracy stops improving.

Model file layout (little-endian)::

    b"KTNM" | u16 version | u32 meta_len | meta JSON (config + training info)
    u32 layer_count
    per layer: u32 name_len | name | u32 ndim | u32 dims... | float32 data
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from .autodiff import Graph, softmax
from .config import FEATURE_KINDS, ModelConfig, TrainConfig
from .data import Dataset
from .exceptions import ConfigError, DatasetError, FormatError, ShapeError, TrainingError
from .formats import BinaryReader, BinaryWriter, content_hash
from .seeding import derive_rng

log = structlog.get_logger(__name__)

MODEL_MAGIC = b"KTNM"
MODEL_VERSION = 1
KERNEL = 3
CHUNK = 256


@dataclass
class TrainingInfo:
    epochs_run: int = 0
    train_accuracy: Optional[float] = None
    train_val_accuracy: Optional[float] = None
    final_lr: Optional[float] = None
    history: List[Dict[str, float]] = field(default_factory=list)


class TrainedModel:
    """Weights plus config. Treat as immutable once training returns; safe to share for inference."""

    def __init__(self, config: ModelConfig, weights: Dict[str, np.ndarray], info: Optional[TrainingInfo] = None):
        self.config = config
        self.weights = weights
        self.info = info or TrainingInfo()

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def model_id(self) -> str:
        h = content_hash(b"".join(content_hash(w).encode() for w in self.weights.values()))
        return h[:16]

    def layer_names(self) -> List[str]:
        return list(self.weights)

    def build_graph(self, dtype=np.float32, loss: Optional[str] = None) -> Graph:
        """Fresh graph over this model's weights. ``loss`` is None, 'mean' or 'sum'."""
        g = Graph(dtype=dtype)
        h = g.placeholder("images", (None,) + tuple(self.config.input_shape))
        for block in range(len(self.config.channels)):
            for conv in (0, 1):
                prefix = f"block{block}_conv{conv}"
                w = g.parameter(f"{prefix}_w", self.weights[f"{prefix}_w"])
                b = g.parameter(f"{prefix}_b", self.weights[f"{prefix}_b"])
                h = g.relu(g.conv2d(h, w, b, name=prefix), name=f"{prefix}_relu")
            h = g.avg_pool2(h, name=f"block{block}_pool")
        h = g.global_avg_pool(h, name="gap")
        h = g.dense(h, g.parameter("embed_w", self.weights["embed_w"]),
                    g.parameter("embed_b", self.weights["embed_b"]), name="embed")
        h = g.relu(h, name="embedding")
        logits = g.dense(h, g.parameter("logits_w", self.weights["logits_w"]),
                         g.parameter("logits_b", self.weights["logits_b"]), name="logits")
        if loss is not None:
            labels = g.labels("labels")
            g.softmax_cross_entropy(logits, labels, reduction=loss, name="loss")
        return g

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        shape = tuple(self.config.input_shape)
        if batch.shape == shape:
            batch = batch[None]
        if batch.ndim != 4 or batch.shape[1:] != shape:
            raise ShapeError("images", ("B",) + shape, batch.shape)
        return batch

    def forward_features(self, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(logits, embeddings) for a batch, evaluated in fixed-size chunks."""
        batch = self._check_batch(batch)
        logits, embeds = [], []
        g = self.build_graph()
        for start in range(0, batch.shape[0], CHUNK):
            out = g.forward(batch[start:start + CHUNK])
            logits.append(out.value)
            embeds.append(g.value("embedding"))
        if not logits:
            return (np.zeros((0, self.num_classes), np.float32),
                    np.zeros((0, self.config.embedding_dim), np.float32))
        return np.concatenate(logits), np.concatenate(embeds)

    def loss_and_input_grad(self, batch: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-sample cross-entropy and ∂loss/∂input, one independent gradient per row."""
        batch = self._check_batch(batch)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        g = self.build_graph(loss="sum")
        losses = np.empty(batch.shape[0], dtype=np.float32)
        grads = np.empty_like(batch)
        for start in range(0, batch.shape[0], CHUNK):
            stop = start + CHUNK
            chunk, y = batch[start:stop], labels[start:stop]
            g.forward(chunk, y)
            logits = g.value("logits").astype(np.float64)
            logp = logits - logits.max(axis=1, keepdims=True)
            logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
            losses[start:stop] = -logp[np.arange(y.size), y]
            g.backward()
            grads[start:stop] = g.grad("images")
        return losses, grads

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(predict_logits(self, batch), axis=1)


def init_model(config: ModelConfig) -> TrainedModel:
    """He-uniform weights from ``config.seed``; zero biases."""
    rng = derive_rng(config.seed, "init")
    weights: Dict[str, np.ndarray] = {}
    cin = config.input_shape[2]
    for block, width in enumerate(config.channels):
        for conv in (0, 1):
            fan_in = KERNEL * KERNEL * cin
            limit = np.sqrt(6.0 / fan_in)
            weights[f"block{block}_conv{conv}_w"] = rng.uniform(
                -limit, limit, size=(KERNEL, KERNEL, cin, width)).astype(np.float32)
            weights[f"block{block}_conv{conv}_b"] = np.zeros(width, np.float32)
            cin = width
    for name, din, dout in (("embed", cin, config.embedding_dim),
                            ("logits", config.embedding_dim, config.num_classes)):
        limit = np.sqrt(6.0 / din)
        weights[f"{name}_w"] = rng.uniform(-limit, limit, size=(din, dout)).astype(np.float32)
        weights[f"{name}_b"] = np.zeros(dout, np.float32)
    return TrainedModel(config, weights)


def predict_logits(model: TrainedModel, batch: np.ndarray) -> np.ndarray:
    return model.forward_features(batch)[0]


def extract_features(model: TrainedModel, batch: np.ndarray, kind: str) -> np.ndarray:
    """Per-image feature rows: raw logits, softmax probabilities, or penultimate embeddings."""
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {kind!r}", field="kind")
    logits, embeddings = model.forward_features(batch)
    if kind == "logits":
        return logits
    if kind == "probs":
        return softmax(logits.astype(np.float64), axis=1).astype(np.float32)
    return embeddings


def accuracy(model: TrainedModel, ds: Dataset) -> float:
    if len(ds) == 0:
        raise DatasetError(f"dataset '{ds.name}' is empty")
    return float(np.mean(model.predict(ds.images) == ds.labels) * 100.0)


def sgd_step(weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             lr: float, cfg: TrainConfig) -> None:
    """In-place SGD update with L2 weight decay and (Nesterov) momentum."""
    for name, p in weights.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False)
        g = g + cfg.weight_decay * p
        v = velocity.setdefault(name, np.zeros_like(p))
        v *= cfg.momentum
        v += g
        step = g + cfg.momentum * v if cfg.nesterov else v
        p -= lr * step


def train(train_split: Dataset, train_val_split: Dataset, cfg: TrainConfig,
          model_config: Optional[ModelConfig] = None, model: Optional[TrainedModel] = None) -> TrainedModel:
    """Train a classifier; returns a new model (``model`` is used as the initial weights)."""
    for split in (train_split, train_val_split):
        if len(split) == 0:
            raise TrainingError(f"split '{split.name}' is empty", stage="train")
    if model is None:
        if model_config is None:
            model_config = ModelConfig(input_shape=train_split.images.shape[1:],
                                       num_classes=train_split.num_classes)
        model = init_model(model_config)
    num_classes = model.num_classes
    for split in (train_split, train_val_split):
        if split.labels.min() < 0 or split.labels.max() >= num_classes:
            raise TrainingError(f"labels of '{split.name}' fall outside [0, {num_classes})", stage="train")
    if train_split.indices is not None and train_val_split.indices is not None:
        if np.intersect1d(train_split.indices, train_val_split.indices).size:
            raise TrainingError("train and train-val splits overlap", stage="train")

    weights = {k: v.copy() for k, v in model.weights.items()}
    trained = TrainedModel(model.config, weights)
    if cfg.epochs == 0:
        trained.info = TrainingInfo(epochs_run=0)
        return trained

    rng = derive_rng(cfg.seed, "train")
    graph = trained.build_graph(loss="mean")
    velocity: Dict[str, np.ndarray] = {}
    lr = cfg.lr
    best = -1.0
    stale = 0
    info = TrainingInfo()
    n = len(train_split)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = float(graph.forward(train_split.images[idx], train_split.labels[idx]).value)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}",
                    stage="train", detail=f"lr={lr}",
                )
            running += loss * idx.size
            grads = graph.backward()
            sgd_step(weights, grads, velocity, lr, cfg)

        tv_acc = accuracy(trained, train_val_split)
        if tv_acc > best:
            best, stale = tv_acc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                lr *= cfg.lr_decay
                stale = 0
        info.history.append({"epoch": epoch, "loss": running / n, "train_val_accuracy": tv_acc, "lr": lr})
        log.info("epoch_done", epoch=epoch, loss=round(running / n, 5), train_val_accuracy=tv_acc, lr=lr)

    info.epochs_run = cfg.epochs
    info.train_val_accuracy = info.history[-1]["train_val_accuracy"]
    info.train_accuracy = accuracy(trained, train_split)
    info.final_lr = lr
    trained.info = info
    return trained


def save(model: TrainedModel, path: Union[str, Path]) -> None:
    meta = {"config": model.config.to_dict(), "info": asdict(model.info)}
    w = BinaryWriter().header(MODEL_MAGIC, MODEL_VERSION, meta).u32(len(model.weights))
    for name, arr in model.weights.items():
        encoded = name.encode("utf-8")
        w.u32(len(encoded)).raw(encoded).array(arr, "f4")
    w.save(path)


def load(path: Union[str, Path], num_classes: Optional[int] = None) -> TrainedModel:
    r = BinaryReader.open(path)
    _, meta = r.header(MODEL_MAGIC, (MODEL_VERSION,))
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"model metadata invalid: {exc}", path=str(path)) from exc
    if num_classes is not None and config.num_classes != num_classes:
        raise FormatError(
            f"model has {config.num_classes} classes but {num_classes} were requested", path=str(path)
        )
    weights: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.raw(r.u32()).decode("utf-8")
        weights[name] = r.array("f4")
    r.expect_end()
    expected = init_model(config).weights
    for name, arr in expected.items():
        if name not in weights or weights[name].shape != arr.shape:
            raise FormatError(f"layer '{name}' missing or misshaped", path=str(path))
    info = TrainingInfo(**meta.get("info", {}))
    return TrainedModel(config, weights, info)
