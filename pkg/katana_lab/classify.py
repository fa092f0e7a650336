"""
Defense heads built on TTA feature matrices.

A ``TtaFeatures`` matrix holds one row per augmentation (N rows) and one
column per feature (C logits or probabilities, or the embedding width).
The TTA classifier sums logit rows and takes the argmax; KATANA flattens
the matrix into one vector and classifies it with a forest (or a linear
head) fitted on clean and adversarial test-val features.

KATANA file::

    b"KTNK" | u16 version | u32 meta_len | meta JSON (layout, attacks, num_classes)
    fit indices i8 (rows,) | embedded head file (forest or linear head format)
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .augment import generate_ttas
from .autodiff import softmax
from .config import FEATURE_KINDS, ForestConfig, LogRegConfig, TtaConfig
from .exceptions import ConfigError, DatasetError, LayoutError, ProtocolError
from .formats import BinaryReader, BinaryWriter
from .forest import ForestModel, LinearHead, fit_forest, fit_logreg, read_head
from .seeding import derive_seed

log = structlog.get_logger(__name__)

KATANA_MAGIC = b"KTNK"
KATANA_VERSION = 1
LAYOUTS = ("generation", "sorted")
MAX_ROWS = 1024

FeatureSet = Union[np.ndarray, Sequence["TtaFeatures"]]


@dataclass(frozen=True, eq=False)
class TtaFeatures:
    """N x width feature matrix of one image; rows stay in augmentation generation order."""

    matrix: np.ndarray
    kind: str = "logits"
    generation_order: bool = True

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim == 1:
            m = m[None]
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise LayoutError(f"TTA features must be a non-empty N x width matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise LayoutError("TTA features contain non-finite values")
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {self.kind!r}", field="kind")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def width(self) -> int:
        return int(self.matrix.shape[1])


def _matrix(f: Union["TtaFeatures", np.ndarray]) -> np.ndarray:
    return f.matrix if isinstance(f, TtaFeatures) else TtaFeatures(f).matrix


def tta_predict(f: Union[TtaFeatures, np.ndarray], mode: str = "logits") -> int:
    """
    argmax_c sum_i l[i, c], lowest class index on ties.

    ``mode="probs"`` averages row softmaxes instead; a diagnostic only.
    """
    m = _matrix(f)
    if mode == "logits":
        scores = m.sum(axis=0)
    elif mode == "probs":
        scores = softmax(m.astype(np.float64), axis=1).mean(axis=0)
    else:
        raise ConfigError(f"mode must be 'logits' or 'probs', got {mode!r}", field="mode")
    return int(np.argmax(scores))


def tta_predict_batch(features: np.ndarray, mode: str = "logits") -> np.ndarray:
    """Row-wise ``tta_predict`` over an (M, N, C) stack."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[1] < 1:
        raise LayoutError(f"expected an (M, N, C) stack, got shape {features.shape}")
    if mode == "logits":
        scores = features.sum(axis=1)
    elif mode == "probs":
        scores = softmax(features.astype(np.float64), axis=2).mean(axis=1)
    else:
        raise ConfigError(f"mode must be 'logits' or 'probs', got {mode!r}", field="mode")
    return np.argmax(scores, axis=1)


@dataclass(frozen=True)
class KatanaLayout:
    n: int
    width: int
    kind: str = "logits"
    ordering: str = "generation"

    def __post_init__(self):
        if self.ordering not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.ordering!r}", field="katana.layout")
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {self.kind!r}",
                              field="katana.features")

    @property
    def dim(self) -> int:
        return self.n * self.width

    def check(self, n: int, width: int) -> None:
        if (n, width) != (self.n, self.width):
            raise LayoutError(
                f"feature matrix is {n} x {width}, layout expects {self.n} x {self.width}",
                expected={"n": self.n, "width": self.width},
                actual={"n": n, "width": width},
            )


def build_katana_features(f: Union[TtaFeatures, np.ndarray], layout: KatanaLayout) -> np.ndarray:
    """
    generation: rows concatenated in generation order.
    sorted: each column sorted descending, then columns concatenated.
    """
    m = _matrix(f)
    layout.check(*m.shape)
    if layout.ordering == "generation":
        return m.reshape(-1).astype(np.float64)
    return (-np.sort(-m, axis=0)).T.reshape(-1).astype(np.float64)


def build_katana_matrix(features: np.ndarray, layout: KatanaLayout) -> np.ndarray:
    """``build_katana_features`` for every image of an (M, N, width) stack."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise LayoutError(f"expected an (M, N, width) stack, got shape {features.shape}")
    layout.check(features.shape[1], features.shape[2])
    if layout.ordering == "generation":
        return features.reshape(features.shape[0], -1).astype(np.float64)
    ordered = -np.sort(-features, axis=1)
    return ordered.transpose(0, 2, 1).reshape(features.shape[0], -1).astype(np.float64)


def _stack(feats: FeatureSet) -> np.ndarray:
    if isinstance(feats, np.ndarray):
        return feats
    return np.stack([_matrix(f) for f in feats])


@dataclass
class KatanaModel:
    head: Union[ForestModel, LinearHead]
    layout: KatanaLayout
    num_classes: int
    attacks: Tuple[str, ...] = ()
    fit_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def head_kind(self) -> str:
        return "forest" if isinstance(self.head, ForestModel) else "logreg"

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        X = build_katana_matrix(features, self.layout)
        return np.argmax(self.head.predict_proba(X), axis=1)


def katana_fit(normal_feats: FeatureSet, adv_feats: FeatureSet, labels: np.ndarray,
               head_cfg: Union[ForestConfig, LogRegConfig, None] = None,
               layout: Optional[KatanaLayout] = None, extra_adv: Sequence[FeatureSet] = (),
               attacks: Sequence[str] = (), indices: Optional[np.ndarray] = None,
               num_classes: Optional[int] = None) -> KatanaModel:
    """
    Fit the head once on the union of clean and adversarial rows, every row
    labeled with its image's true class. ``extra_adv`` adds further
    adversarial sets (one per additional attack) aligned with ``labels``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    sets = [_stack(normal_feats), _stack(adv_feats)] + [_stack(a) for a in extra_adv]
    for s in sets:
        if s.shape[0] != labels.shape[0]:
            raise DatasetError(f"feature set has {s.shape[0]} rows but there are {labels.shape[0]} labels")
    if layout is None:
        layout = KatanaLayout(n=sets[0].shape[1], width=sets[0].shape[2])
    X = np.concatenate([build_katana_matrix(s, layout) for s in sets])
    y = np.tile(labels, len(sets))
    num_classes = int(num_classes if num_classes is not None else labels.max() + 1)

    head_cfg = head_cfg or ForestConfig()
    if isinstance(head_cfg, ForestConfig):
        head = fit_forest(X, y, head_cfg, num_classes=num_classes)
    elif isinstance(head_cfg, LogRegConfig):
        head = fit_logreg(X, y, num_classes=num_classes, **asdict(head_cfg))
    else:
        raise ConfigError(f"unsupported head config {type(head_cfg).__name__}", field="katana.head")
    fit_indices = np.zeros(0, np.int64) if indices is None else np.asarray(indices, dtype=np.int64)
    log.info("katana_fit", rows=X.shape[0], dim=X.shape[1], head=type(head).__name__, attacks=list(attacks))
    return KatanaModel(head, layout, num_classes, tuple(attacks), fit_indices)


def katana_predict(model: KatanaModel, f: Union[TtaFeatures, np.ndarray]) -> int:
    vector = build_katana_features(f, model.layout)
    return int(np.argmax(model.head.predict_proba(vector[None])[0]))


def check_protocol(model: KatanaModel, test_indices: np.ndarray) -> None:
    """Raise if any sample the head was fitted on belongs to the evaluation split."""
    leaked = np.intersect1d(model.fit_indices, np.asarray(test_indices, dtype=np.int64))
    if leaked.size:
        raise ProtocolError(f"KATANA head was fitted on {leaked.size} test-split samples",
                            stage="katana", detail=f"first leaked indices: {leaked[:5].tolist()}")


def save_katana(model: KatanaModel, path: Union[str, Path]) -> None:
    meta = {"layout": asdict(model.layout), "attacks": list(model.attacks), "num_classes": model.num_classes,
            "head": model.head_kind}
    (BinaryWriter().header(KATANA_MAGIC, KATANA_VERSION, meta)
     .array(model.fit_indices, "i8")
     .raw(model.head.to_bytes())
     .save(path))


def load_katana(path: Union[str, Path], n: Optional[int] = None, num_classes: Optional[int] = None) -> KatanaModel:
    """Load a KATANA file; refuses a model whose N or class count differs from the requested one."""
    r = BinaryReader.open(path)
    _, meta = r.header(KATANA_MAGIC, (KATANA_VERSION,))
    layout = KatanaLayout(**meta["layout"])
    if n is not None and n != layout.n:
        raise LayoutError(f"KATANA model was fitted for N={layout.n}, requested N={n}",
                          expected={"n": n}, actual={"n": layout.n})
    if num_classes is not None and num_classes != meta["num_classes"]:
        raise LayoutError(f"KATANA model has {meta['num_classes']} classes, requested {num_classes}",
                          expected={"num_classes": num_classes}, actual={"num_classes": meta["num_classes"]})
    fit_indices = r.array("i8")
    head = read_head(r, expect_end=True)
    return KatanaModel(head, layout, int(meta["num_classes"]), tuple(meta["attacks"]), fit_indices)


def ensemble_predict(models: Sequence, x: np.ndarray) -> Union[int, np.ndarray]:
    """Majority vote of argmax predictions; ties go to the larger summed logit, then the lowest index."""
    if not models:
        raise ConfigError("ensemble needs at least one model", field="ensemble_size")
    classes = {m.num_classes for m in models}
    if len(classes) != 1:
        raise ConfigError(f"ensemble members disagree on class count: {sorted(classes)}", field="ensemble_size")
    num_classes = classes.pop()
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    batch = x[None] if single else x

    votes = np.zeros((batch.shape[0], num_classes), dtype=np.int64)
    summed = np.zeros((batch.shape[0], num_classes), dtype=np.float64)
    rows = np.arange(batch.shape[0])
    for model in models:
        logits = model.forward_features(batch)[0].astype(np.float64)
        votes[rows, np.argmax(logits, axis=1)] += 1
        summed += logits
    leading = votes == votes.max(axis=1, keepdims=True)
    labels = np.argmax(np.where(leading, summed, -np.inf), axis=1)
    return int(labels[0]) if single else labels


def compute_tta_features(model, images: np.ndarray, tta: TtaConfig, seed: int,
                         keys: Optional[Sequence[int]] = None, kinds: Sequence[str] = ("logits",),
                         n: Optional[int] = None, workers: int = 1,
                         progress: Optional[Callable[[int], None]] = None) -> Dict[str, np.ndarray]:
    """
    (M, N, width) feature stacks per requested kind. Image ``k`` is augmented
    from stream ``(seed, "tta-eval", keys[k])``, so results are independent of
    chunking and worker count.
    """
    for kind in kinds:
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {kind!r}", field="kind")
    images = np.asarray(images, dtype=np.float32)
    keys = np.arange(images.shape[0]) if keys is None else np.asarray(keys, dtype=np.int64)
    n = tta.n if n is None else n
    chunk = max(1, MAX_ROWS // n)
    parts: Dict[str, List[np.ndarray]] = {k: [] for k in kinds}

    def augment(i: int) -> np.ndarray:
        return generate_ttas(images[i], tta, derive_seed(seed, "tta-eval", int(keys[i])), n=n)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, images.shape[0], chunk):
            idx = range(start, min(start + chunk, images.shape[0]))
            batches = list(pool.map(augment, idx)) if pool else [augment(i) for i in idx]
            flat = np.concatenate(batches)
            logits, embeddings = model.forward_features(flat)
            b = len(batches)
            for kind in kinds:
                if kind == "logits":
                    out = logits
                elif kind == "probs":
                    out = softmax(logits.astype(np.float64), axis=1).astype(np.float32)
                else:
                    out = embeddings
                parts[kind].append(out.reshape(b, n, -1))
            if progress is not None:
                progress(idx.stop)
    finally:
        if pool is not None:
            pool.shutdown()
    width = {"logits": model.num_classes, "probs": model.num_classes, "embeddings": model.config.embedding_dim}
    return {
        kind: np.concatenate(chunks) if chunks else np.zeros((0, n, width[kind]), np.float32)
        for kind, chunks in parts.items()
    }
