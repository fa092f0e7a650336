"""
Configuration records for katana-lab.

Plain dataclasses with ``from_dict`` / ``to_dict``. Keys are snake_case;
unknown keys are rejected with a ``ConfigError`` naming the field. An
``ExperimentConfig`` loads from YAML; parse errors and validation errors
both report the line of the offending key where it can be found.

Environment overrides (read after ``load_dotenv()``):

    KATANA_LAB_OUTPUT_DIR, KATANA_LAB_CACHE_DIR, KATANA_LAB_WORKERS

``KATANA_LAB_LOG_LEVEL`` is read by the command line entry point.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from .exceptions import ConfigError

Interval = Tuple[float, float]

BLUR_SIGMA_MIN = 0.001
FEATURE_KINDS = ("logits", "probs", "embeddings")
DEFENSES = ("plain", "ensemble", "tta", "katana", "katana-logreg")
FIT_MODES = ("per-attack", "global", "loocv")
ATTACK_KINDS = ("fgsm", "pgd", "a-fgsm", "a-pgd")


def _check_keys(cls, data: Dict[str, Any], section: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping", field=section)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in '{section}'", field=f"{section}.{key}")


def _interval(value: Any, name: str) -> Interval:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be a [low, high] pair, got {value!r}", field=name)
    if lo > hi:
        raise ConfigError(f"'{name}' has low {lo} > high {hi}", field=name)
    return lo, hi


def _require(cond: bool, message: str, field_name: str) -> None:
    if not cond:
        raise ConfigError(message, field=field_name)


def _hash(payload: Dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TtaConfig:
    """Parameter intervals of the randomized test-time augmentation pipeline."""

    strength: str = "hard"
    rotation: Interval = (-15.0, 15.0)  # degrees
    translation: int = 2  # pixels, integer shifts in [-t, t]
    scale: Interval = (0.9, 1.1)
    flip_prob: float = 0.5
    brightness: Interval = (0.6, 1.4)
    contrast: Interval = (0.7, 1.3)
    saturation: Interval = (0.5, 1.5)
    hue: Interval = (-0.06, 0.06)
    gamma: Interval = (0.7, 1.3)
    blur_sigma_max: float = 0.5
    noise_sigma_max: float = 0.005
    mirror_enabled: bool = True
    pad_to: Optional[int] = None  # None pads to twice the image size
    n: int = 256

    def __post_init__(self):
        for name in ("rotation", "scale", "brightness", "contrast", "saturation", "hue", "gamma"):
            object.__setattr__(self, name, _interval(getattr(self, name), f"tta.{name}"))
        _require(self.translation >= 0, "translation must be >= 0", "tta.translation")
        _require(0.0 <= self.flip_prob <= 1.0, "flip_prob must be in [0, 1]", "tta.flip_prob")
        _require(self.noise_sigma_max >= 0.0, "noise_sigma_max must be >= 0", "tta.noise_sigma_max")
        _require(self.blur_sigma_max >= BLUR_SIGMA_MIN,
                 f"blur_sigma_max must be >= {BLUR_SIGMA_MIN}", "tta.blur_sigma_max")
        _require(self.scale[0] > 0, "scale must be positive", "tta.scale")
        _require(self.n >= 1, "n must be >= 1", "tta.n")

    @classmethod
    def hard(cls, **overrides) -> "TtaConfig":
        return replace(cls(), **overrides)

    @classmethod
    def soft(cls, **overrides) -> "TtaConfig":
        base = cls(
            strength="soft",
            rotation=(-8.0, 8.0),
            scale=(0.95, 1.05),
            brightness=(0.8, 1.2),
            contrast=(0.85, 1.15),
            saturation=(0.75, 1.25),
            hue=(-0.03, 0.03),
            gamma=(0.85, 1.15),
            blur_sigma_max=0.25,
        )
        return replace(base, **overrides)

    @classmethod
    def identity(cls, **overrides) -> "TtaConfig":
        """Every interval collapsed onto the identity value; flips never happen."""
        base = cls(
            strength="identity",
            rotation=(0.0, 0.0),
            translation=0,
            scale=(1.0, 1.0),
            flip_prob=0.0,
            brightness=(1.0, 1.0),
            contrast=(1.0, 1.0),
            saturation=(1.0, 1.0),
            hue=(0.0, 0.0),
            gamma=(1.0, 1.0),
            blur_sigma_max=BLUR_SIGMA_MIN,
            noise_sigma_max=0.0,
        )
        return replace(base, **overrides)

    def for_image_size(self, size: int) -> "TtaConfig":
        """Translation bound of 2 pixels per 32 pixels of image side."""
        return replace(self, translation=2 * max(1, size // 32) if self.translation else 0)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TtaConfig":
        data = dict(data or {})
        strength = data.pop("strength", "hard")
        presets = {"hard": cls.hard, "soft": cls.soft, "identity": cls.identity}
        if strength not in presets:
            raise ConfigError(f"tta strength must be one of {sorted(presets)}, got {strength!r}",
                              field="tta.strength")
        _check_keys(cls, data, "tta")
        return presets[strength](**data)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def cache_key(self) -> str:
        return _hash(self.to_dict())


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    eps: float = 0.031
    alpha: float = 0.003
    iterations: int = 100
    targeted: bool = True
    target_offset: int = 1  # target = (true label + offset) mod classes
    n_tta: int = 1
    tta: Optional[TtaConfig] = None  # None: use the defender's TtaConfig
    projection: str = "clamp"
    random_start: Optional[bool] = None  # None: True for pgd, False for a-pgd
    reuse_tta: bool = False
    name: str = ""

    def __post_init__(self):
        _require(self.kind in ATTACK_KINDS, f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}",
                 "attacks.kind")
        _require(self.eps > 0, "eps must be > 0", "attacks.eps")
        _require(self.alpha > 0, "alpha must be > 0", "attacks.alpha")
        _require(self.iterations >= 1, "iterations must be >= 1", "attacks.iterations")
        _require(self.projection in ("clamp", "radial"), "projection must be 'clamp' or 'radial'",
                 "attacks.projection")
        if self.adaptive:
            _require(self.n_tta >= 1, "n_tta must be >= 1 for adaptive attacks", "attacks.n_tta")
        if not self.name:
            object.__setattr__(self, "name", f"{self.kind}-{self.eps:g}")

    @property
    def adaptive(self) -> bool:
        return self.kind.startswith("a-")

    @property
    def family(self) -> str:
        return self.kind

    @property
    def starts_random(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        return self.kind == "pgd"

    def target_labels(self, labels, num_classes: int):
        """Labels fed to the loss: the target class when targeted, else the true class."""
        if not self.targeted:
            return labels
        return (labels + self.target_offset) % num_classes

    @classmethod
    def fgsm(cls, eps: float = 0.031, **overrides) -> "AttackConfig":
        overrides.setdefault("alpha", eps)
        overrides.setdefault("iterations", 1)
        return cls(kind="fgsm", eps=eps, **overrides)

    @classmethod
    def pgd(cls, eps: float = 0.031, **overrides) -> "AttackConfig":
        overrides.setdefault("alpha", 0.003)
        overrides.setdefault("iterations", 100)
        return cls(kind="pgd", eps=eps, **overrides)

    @classmethod
    def a_fgsm(cls, eps: float = 0.031, **overrides) -> "AttackConfig":
        overrides.setdefault("n_tta", 256)
        overrides.setdefault("alpha", eps)
        overrides.setdefault("iterations", 1)
        return cls(kind="a-fgsm", eps=eps, **overrides)

    @classmethod
    def a_pgd(cls, eps: float = 0.031, **overrides) -> "AttackConfig":
        overrides.setdefault("n_tta", 25)
        overrides.setdefault("iterations", 10)
        overrides.setdefault("alpha", 0.007)
        return cls(kind="a-pgd", eps=eps, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "AttackConfig":
        builders = {
            "fgsm1": (cls.fgsm, 0.01),
            "fgsm2": (cls.fgsm, 0.031),
            "pgd1": (cls.pgd, 0.01),
            "pgd2": (cls.pgd, 0.031),
            "a-fgsm": (cls.a_fgsm, 0.031),
            "a-pgd": (cls.a_pgd, 0.031),
        }
        if name not in builders:
            raise ConfigError(f"unknown attack preset {name!r}; known: {sorted(builders)}",
                              field="attacks.preset")
        build, eps = builders[name]
        overrides.setdefault("name", name)
        eps = overrides.pop("eps", eps)
        return build(eps, **overrides)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackConfig":
        data = dict(data)
        tta = data.pop("tta", None)
        if tta is not None:
            data["tta"] = TtaConfig.from_dict(tta)
        preset = data.pop("preset", None)
        _check_keys(cls, data, "attacks")
        if preset is not None:
            return cls.preset(preset, **data)
        if "kind" not in data:
            raise ConfigError("attack needs a 'kind' or a 'preset'", field="attacks.kind")
        kind = data.pop("kind")
        builders = {"fgsm": cls.fgsm, "pgd": cls.pgd, "a-fgsm": cls.a_fgsm, "a-pgd": cls.a_pgd}
        if kind not in builders:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {kind!r}", field="attacks.kind")
        eps = data.pop("eps", 0.031)
        return builders[kind](eps, **data)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["tta"] = self.tta.to_dict() if self.tta is not None else None
        return out


@dataclass(frozen=True)
class ModelConfig:
    input_shape: Tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 4
    channels: Tuple[int, ...] = (8, 16, 32)
    embedding_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        _require(len(self.input_shape) == 3, "input_shape must be (H, W, C)", "model.input_shape")
        _require(self.num_classes >= 2, "num_classes must be >= 2", "model.num_classes")
        _require(len(self.channels) >= 1 and all(c >= 1 for c in self.channels),
                 "channels must be positive", "model.channels")
        _require(self.embedding_dim >= 1, "embedding_dim must be >= 1", "model.embedding_dim")
        side = 2 ** len(self.channels)
        _require(self.input_shape[0] % side == 0 and self.input_shape[1] % side == 0,
                 f"input height and width must be divisible by {side}", "model.input_shape")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        _check_keys(cls, data or {}, "model")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "channels": list(self.channels), "embedding_dim": self.embedding_dim, "seed": self.seed}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.1
    lr_decay: float = 0.9
    patience: int = 3
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        _require(self.epochs >= 0, "epochs must be >= 0", "train.epochs")
        _require(self.batch_size >= 1, "batch_size must be >= 1", "train.batch_size")
        for name in ("lr", "lr_decay", "momentum"):
            value = getattr(self, name)
            _require(0.0 < value <= 1.0, f"{name} must be in (0, 1]", f"train.{name}")
        _require(0.0 <= self.weight_decay < 1.0, "weight_decay must be in [0, 1)", "train.weight_decay")
        _require(self.patience >= 1, "patience must be >= 1", "train.patience")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        _check_keys(cls, data or {}, "train")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    max_depth: int = 0  # 0 = unlimited
    min_samples_leaf: int = 1
    max_features: Union[str, int] = "sqrt"
    bootstrap: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        _require(self.n_trees >= 1, "n_trees must be >= 1", "forest.n_trees")
        _require(self.max_depth >= 0, "max_depth must be >= 0", "forest.max_depth")
        _require(self.min_samples_leaf >= 1, "min_samples_leaf must be >= 1", "forest.min_samples_leaf")
        _require(self.max_features in ("sqrt", "all") or (isinstance(self.max_features, int) and self.max_features >= 1),
                 "max_features must be 'sqrt', 'all' or a positive int", "forest.max_features")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return min(int(self.max_features), n_features)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ForestConfig":
        _check_keys(cls, data or {}, "forest")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LogRegConfig:
    l2: float = 1e-3
    epochs: int = 500
    lr: float = 1.0  # upper bound; the step is capped at 1/L
    tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        _require(self.l2 >= 0, "l2 must be >= 0", "logreg.l2")
        _require(self.epochs >= 1, "epochs must be >= 1", "logreg.epochs")
        _require(self.lr > 0, "lr must be > 0", "logreg.lr")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LogRegConfig":
        _check_keys(cls, data or {}, "logreg")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SplitSpec:
    train_val_fraction: float = 0.05
    test_val_count: int = 2500
    seed: int = 0

    def __post_init__(self):
        _require(0.0 < self.train_val_fraction < 1.0, "train_val_fraction must be in (0, 1)",
                 "split.train_val_fraction")
        _require(self.test_val_count >= 1, "test_val_count must be >= 1", "split.test_val_count")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitSpec":
        _check_keys(cls, data or {}, "split")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # synthetic | cifar10
    classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 125
    size: int = 32
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        _require(self.source in ("synthetic", "cifar10"), "source must be 'synthetic' or 'cifar10'",
                 "dataset.source")
        if self.source == "cifar10":
            _require(bool(self.path), "cifar10 source needs a 'path'", "dataset.path")

    @property
    def name(self) -> str:
        if self.source == "cifar10":
            return "cifar10"
        return f"synthetic{self.classes}x{self.size}"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        _check_keys(cls, data or {}, "dataset")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class KatanaSettings:
    features: str = "logits"
    layout: str = "generation"  # generation | sorted
    fit_mode: str = "per-attack"

    def __post_init__(self):
        _require(self.features in FEATURE_KINDS, f"features must be one of {FEATURE_KINDS}", "katana.features")
        _require(self.layout in ("generation", "sorted"), "layout must be 'generation' or 'sorted'",
                 "katana.layout")
        _require(self.fit_mode in FIT_MODES, f"fit_mode must be one of {FIT_MODES}", "katana.fit_mode")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KatanaSettings":
        _check_keys(cls, data or {}, "katana")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class AblationSettings:
    n_values: Tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128, 256)
    repeats: int = 5
    attack: Optional[str] = None  # attack name; None = first configured attack
    sigma_max_values: Tuple[float, ...] = (0.0, 0.005, 0.0125)

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "sigma_max_values", tuple(float(s) for s in self.sigma_max_values))
        _require(all(n >= 1 for n in self.n_values), "n_values must be >= 1", "ablation.n_values")
        _require(list(self.n_values) == sorted(self.n_values), "n_values must be sorted ascending",
                 "ablation.n_values")
        _require(self.repeats >= 1, "repeats must be >= 1", "ablation.repeats")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationSettings":
        _check_keys(cls, data or {}, "ablation")
        return cls(**(data or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {"n_values": list(self.n_values), "repeats": self.repeats, "attack": self.attack,
                "sigma_max_values": list(self.sigma_max_values)}


@dataclass
class ExperimentConfig:
    """Everything one evaluation run needs. All randomness derives from ``seed``."""

    name: str = "desk"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(test_val_count=250))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TtaConfig = field(default_factory=lambda: TtaConfig.hard(n=64))
    attacks: List[AttackConfig] = field(default_factory=lambda: [AttackConfig.preset("fgsm2"),
                                                                 AttackConfig.preset("pgd2")])
    forest: ForestConfig = field(default_factory=lambda: ForestConfig(n_trees=300))
    logreg: LogRegConfig = field(default_factory=LogRegConfig)
    defenses: List[str] = field(default_factory=lambda: ["plain", "tta", "katana"])
    katana: KatanaSettings = field(default_factory=KatanaSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    ensemble_size: int = 9
    model_path: Optional[str] = None
    output_dir: str = "results"
    cache_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        for d in self.defenses:
            _require(d in DEFENSES, f"unknown defense {d!r}; known: {DEFENSES}", "defenses")
        names = [a.name for a in self.attacks]
        _require(len(names) == len(set(names)), f"attack names must be unique, got {names}", "attacks")
        _require(self.ensemble_size >= 1, "ensemble_size must be >= 1", "ensemble_size")
        _require(self.workers >= 1, "workers must be >= 1", "workers")
        if self.model_path is not None:
            _require(Path(self.model_path).exists(), f"model file not found: {self.model_path}", "model_path")
        if self.dataset.source == "cifar10":
            _require(Path(self.dataset.path).is_dir(), f"dataset directory not found: {self.dataset.path}",
                     "dataset.path")

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @property
    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    def attack(self, name: str) -> AttackConfig:
        for a in self.attacks:
            if a.name == name:
                return a
        raise ConfigError(f"no attack named {name!r}; configured: {[a.name for a in self.attacks]}",
                          field="attacks")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        data = dict(data or {})
        _check_keys(cls, data, "experiment")
        sections = {
            "dataset": DatasetSpec, "split": SplitSpec, "model": ModelConfig, "train": TrainConfig,
            "forest": ForestConfig, "logreg": LogRegConfig, "katana": KatanaSettings,
            "ablation": AblationSettings,
        }
        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = sections[key].from_dict(value)
            elif key == "tta":
                kwargs[key] = TtaConfig.from_dict(value)
            elif key == "attacks":
                if not isinstance(value, list):
                    raise ConfigError("'attacks' must be a list", field="attacks")
                kwargs[key] = [
                    AttackConfig.preset(item) if isinstance(item, str) else AttackConfig.from_dict(item)
                    for item in value
                ]
            else:
                kwargs[key] = value
        if "split" not in kwargs:
            kwargs["split"] = SplitSpec(test_val_count=250)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "split": self.split.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "tta": self.tta.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "forest": self.forest.to_dict(),
            "logreg": self.logreg.to_dict(),
            "defenses": list(self.defenses),
            "katana": self.katana.to_dict(),
            "ablation": self.ablation.to_dict(),
            "ensemble_size": self.ensemble_size,
            "model_path": self.model_path,
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "workers": self.workers,
        }

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @classmethod
    def load(cls, path: Union[str, Path], env: bool = True) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", field=str(path))
        text = path.read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text) or {}
            lines = _key_lines(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML in {path}: {getattr(exc, 'problem', exc)}",
                              line=mark.line + 1 if mark else None) from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level", line=1)
        if env:
            load_dotenv()
            data = _apply_env(data)
        try:
            return cls.from_dict(data)
        except ConfigError as exc:
            if exc.line is None and exc.field:
                raise ConfigError(exc.args[0], field=exc.field, line=_lookup_line(lines, exc.field)) from exc
            raise


def _apply_env(data: Dict[str, Any]) -> Dict[str, Any]:
    data = dict(data)
    env_map = {
        "KATANA_LAB_OUTPUT_DIR": ("output_dir", str),
        "KATANA_LAB_CACHE_DIR": ("cache_dir", str),
        "KATANA_LAB_WORKERS": ("workers", int),
    }
    for var, (key, conv) in env_map.items():
        value = os.environ.get(var)
        if value:
            try:
                data[key] = conv(value)
            except ValueError:
                raise ConfigError(f"environment variable {var}={value!r} is not a valid {conv.__name__}",
                                  field=key)
    return data


def _key_lines(text: str) -> Dict[str, int]:
    """Map dotted key paths (``attacks.eps`` style, list indices dropped) to 1-based lines."""
    lines: Dict[str, int] = {}

    def walk(node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                key = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines.setdefault(key, key_node.start_mark.line + 1)
                walk(value_node, key)
        elif isinstance(node, yaml.SequenceNode):
            for item in node.value:
                walk(item, prefix)

    root = yaml.compose(text)
    if root is not None:
        walk(root, "")
    return lines


def _lookup_line(lines: Dict[str, int], field_name: str) -> Optional[int]:
    name = field_name[len("experiment."):] if field_name.startswith("experiment.") else field_name
    while name:
        if name in lines:
            return lines[name]
        if "." not in name:
            break
        name = name.rsplit(".", 1)[0]
    return None
