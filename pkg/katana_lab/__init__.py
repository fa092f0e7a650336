"""
katana-lab: test-time augmentation and KATANA defenses against adversarial
images, with the attacks that target them.

Quick start::

    from katana_lab import ExperimentConfig, KatanaLab

    lab = KatanaLab(ExperimentConfig.desk(output_dir="results"))

    table = lab.experiments.evaluate()
    print(table.find("katana", "pgd2").adversarial_accuracy)

Or from the shell::

    katana-lab eval --config configs/desk.yaml --out results/
"""

from .attacks import AdversarialResult, a_fgsm, a_pgd, fgsm, pgd, project, run_attack
from .augment import TtaParams, apply_tta, generate_ttas, sample_params
from .autodiff import Graph, Tensor, finite_diff_check, forward, grad_input
from .cache import CacheKey, LogitsCache, cache_logits
from .classify import (
    KatanaLayout,
    KatanaModel,
    TtaFeatures,
    build_katana_features,
    ensemble_predict,
    katana_fit,
    katana_predict,
    load_katana,
    save_katana,
    tta_predict,
)
from .config import (
    AttackConfig,
    ExperimentConfig,
    ForestConfig,
    LogRegConfig,
    ModelConfig,
    TrainConfig,
    TtaConfig,
)
from .data import Dataset, generate_synthetic, load_cifar10_binary, split
from .exceptions import (
    CacheError,
    ConfigError,
    DatasetError,
    FormatError,
    GradientError,
    KatanaError,
    LayoutError,
    ProtocolError,
    ShapeError,
    TrainingError,
)
from .forest import ForestModel, LinearHead, fit_forest, fit_logreg, forest_predict, gini
from .lab import KatanaLab
from .network import TrainedModel, init_model, predict_logits, train
from .results import ResultRow, ResultsTable

__version__ = "0.1.0"

__all__ = [
    "KatanaLab",
    # Config
    "ExperimentConfig",
    "AttackConfig",
    "TtaConfig",
    "ModelConfig",
    "TrainConfig",
    "ForestConfig",
    "LogRegConfig",
    # Exceptions
    "KatanaError",
    "CacheError",
    "ConfigError",
    "DatasetError",
    "FormatError",
    "GradientError",
    "LayoutError",
    "ProtocolError",
    "ShapeError",
    "TrainingError",
    # Data and models
    "Dataset",
    "generate_synthetic",
    "load_cifar10_binary",
    "split",
    "Graph",
    "Tensor",
    "forward",
    "grad_input",
    "finite_diff_check",
    "TrainedModel",
    "init_model",
    "predict_logits",
    "train",
    # Augmentation and attacks
    "TtaParams",
    "sample_params",
    "apply_tta",
    "generate_ttas",
    "AdversarialResult",
    "project",
    "fgsm",
    "pgd",
    "a_fgsm",
    "a_pgd",
    "run_attack",
    # Classifiers
    "ForestModel",
    "LinearHead",
    "gini",
    "fit_forest",
    "fit_logreg",
    "forest_predict",
    "TtaFeatures",
    "KatanaLayout",
    "KatanaModel",
    "tta_predict",
    "build_katana_features",
    "katana_fit",
    "katana_predict",
    "save_katana",
    "load_katana",
    "ensemble_predict",
    # Harness
    "CacheKey",
    "LogitsCache",
    "cache_logits",
    "ResultRow",
    "ResultsTable",
]
