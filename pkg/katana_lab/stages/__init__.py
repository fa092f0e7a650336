from .attacks import AttackStage
from .data import DataStage, Splits
from .defenses import DefenseStage
from .experiments import ExperimentStage
from .models import ModelStage

__all__ = [
    "AttackStage",
    "DataStage",
    "DefenseStage",
    "ExperimentStage",
    "ModelStage",
    "Splits",
]
